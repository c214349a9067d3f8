#include "coeforge/model.hpp"

#include <cmath>
#include <string>

#include "coeforge/errors.hpp"
#include "coeforge/optimizer.hpp"
#include "coeforge/rng.hpp"
#include "coeforge/vocab.hpp"

namespace coeforge {

namespace {

constexpr std::array<const char*, kAdaptedPerLayer> kAdaptedNames = {
    "attn.query", "attn.key", "attn.value", "attn.output", "ff.in", "ff.out"};

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, stddev);
  }
  return m;
}

template <class Params, class Fn>
void visit_base(Params& p, const Fn& fn) {
  fn("tok_emb", p.base.token_embedding);
  fn("pos_emb", p.base.position_embedding);
  for (std::size_t i = 0; i < p.base.layers.size(); ++i) {
    auto& l = p.base.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    fn(pre + "ln1.gain", l.ln1_gain);
    fn(pre + "ln1.bias", l.ln1_bias);
    for (int m = 0; m < kAdaptedPerLayer; ++m) fn(pre + kAdaptedNames[m], l.adapted(static_cast<AdaptedMatrix>(m)));
    fn(pre + "ln2.gain", l.ln2_gain);
    fn(pre + "ln2.bias", l.ln2_bias);
  }
  fn("final.gain", p.base.final_gain);
  fn("final.bias", p.base.final_bias);
  fn("out_proj", p.base.output_projection);
}

template <class Params, class Fn>
void visit_adapter(Params& p, const Fn& fn) {
  for (std::size_t i = 0; i < p.adapter.layers.size(); ++i) {
    for (int m = 0; m < kAdaptedPerLayer; ++m) {
      auto& f = p.adapter.layers[i][static_cast<std::size_t>(m)];
      const std::string pre = "layer" + std::to_string(i) + "." + kAdaptedNames[m];
      fn(pre + ".lora_down", f.down);
      fn(pre + ".lora_up", f.up);
    }
  }
}

}  // namespace

void ModelShape::validate() const {
  if (layers < 0) throw InputError("model shape: layers must be >= 0");
  if (heads <= 0 || dim <= 0 || dim % heads != 0) throw InputError("model shape: dim must be a positive multiple of heads");
  if (ff_dim <= 0 || context <= 0) throw InputError("model shape: ff_dim and context must be positive");
  if (vocab <= 0 || static_cast<std::size_t>(vocab) > Vocab::kMaxSize) throw InputError("model shape: vocab must be in [1, 512]");
  if (adapter_rank <= 0 || adapter_alpha <= 0) throw InputError("model shape: adapter rank and alpha must be positive");
}

Matrix& LayerWeights::adapted(AdaptedMatrix m) {
  switch (m) {
    case AdaptedMatrix::kQuery: return query;
    case AdaptedMatrix::kKey: return key;
    case AdaptedMatrix::kValue: return value;
    case AdaptedMatrix::kOutput: return output;
    case AdaptedMatrix::kFeedForwardIn: return ff_in;
    case AdaptedMatrix::kFeedForwardOut: return ff_out;
  }
  throw InputError("unknown adapted matrix");
}

const Matrix& LayerWeights::adapted(AdaptedMatrix m) const {
  return const_cast<LayerWeights*>(this)->adapted(m);
}

ModelParams ModelParams::initialize(const ModelShape& shape, std::uint64_t seed, double init_std,
                                    double embedding_std) {
  shape.validate();
  Rng rng(seed);
  ModelParams p;
  p.shape = shape;
  const Eigen::Index c = shape.dim;
  const Eigen::Index f = shape.ff_dim;
  p.base.token_embedding = random_normal(shape.vocab, c, embedding_std, rng);
  p.base.position_embedding = random_normal(shape.context, c, embedding_std, rng);
  p.base.layers.resize(static_cast<std::size_t>(shape.layers));
  for (auto& l : p.base.layers) {
    l.ln1_gain = Matrix::Ones(1, c);
    l.ln1_bias = Matrix::Zero(1, c);
    l.ln2_gain = Matrix::Ones(1, c);
    l.ln2_bias = Matrix::Zero(1, c);
    l.query = random_normal(c, c, init_std, rng);
    l.key = random_normal(c, c, init_std, rng);
    l.value = random_normal(c, c, init_std, rng);
    l.output = random_normal(c, c, init_std, rng);
    l.ff_in = random_normal(c, f, init_std, rng);
    l.ff_out = random_normal(f, c, init_std, rng);
  }
  p.base.final_gain = Matrix::Ones(1, c);
  p.base.final_bias = Matrix::Zero(1, c);
  p.base.output_projection = random_normal(c, shape.vocab, init_std, rng);

  p.adapter.layers.resize(static_cast<std::size_t>(shape.layers));
  for (std::size_t i = 0; i < p.adapter.layers.size(); ++i) {
    for (int m = 0; m < kAdaptedPerLayer; ++m) {
      const Matrix& w = p.base.layers[i].adapted(static_cast<AdaptedMatrix>(m));
      auto& fac = p.adapter.layers[i][static_cast<std::size_t>(m)];
      fac.down = random_normal(w.rows(), shape.adapter_rank, 1.0 / std::sqrt(static_cast<double>(w.rows())), rng);
      fac.up = Matrix::Zero(shape.adapter_rank, w.cols());
    }
  }
  return p;
}

void ModelParams::for_each_base(const std::function<void(const std::string&, Matrix&)>& fn) { visit_base(*this, fn); }
void ModelParams::for_each_base(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  visit_base(*this, fn);
}
void ModelParams::for_each_adapter(const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_adapter(*this, fn);
}
void ModelParams::for_each_adapter(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  visit_adapter(*this, fn);
}

Matrix ModelParams::effective(int layer, AdaptedMatrix m) const {
  const auto& fac = adapter.layers.at(static_cast<std::size_t>(layer))[static_cast<std::size_t>(m)];
  return base.layers.at(static_cast<std::size_t>(layer)).adapted(m) + shape.adapter_scale() * (fac.down * fac.up);
}

bool ModelParams::adapter_is_zero() const {
  for (const auto& layer : adapter.layers) {
    for (const auto& fac : layer) {
      if (!fac.up.isZero(0.0) && !fac.down.isZero(0.0)) return false;
    }
  }
  return true;
}

void ModelParams::check_finite() const {
  auto check = [](const std::string& name, const Matrix& m) {
    if (!m.allFinite()) throw InternalError("non-finite weight in block " + name);
  };
  for_each_base(check);
  for_each_adapter(check);
}

MixedSequence& MixedSequence::tokens(TokenSeq ids) {
  segments_.emplace_back(std::move(ids));
  return *this;
}

MixedSequence& MixedSequence::embeddings(Matrix block) {
  segments_.emplace_back(std::move(block));
  return *this;
}

std::size_t MixedSequence::length() const {
  std::size_t n = 0;
  for (const auto& s : segments_) {
    n += std::holds_alternative<TokenSeq>(s) ? std::get<TokenSeq>(s).size()
                                             : static_cast<std::size_t>(std::get<Matrix>(s).rows());
  }
  return n;
}

MixedSequence prompt_sequence(const Matrix* prefix, const TokenSeq& query, const Matrix* suffix) {
  MixedSequence seq;
  seq.tokens({Vocab::kBos});
  if (prefix != nullptr) seq.embeddings(*prefix);
  seq.tokens(query);
  if (suffix != nullptr) seq.embeddings(*suffix);
  seq.tokens({Vocab::kSep});
  return seq;
}

MixedSequence prompt_sequence(const TokenSeq& query, const TokenSeq& suffix) {
  TokenSeq ids;
  ids.reserve(query.size() + suffix.size() + 2);
  ids.push_back(Vocab::kBos);
  ids.insert(ids.end(), query.begin(), query.end());
  ids.insert(ids.end(), suffix.begin(), suffix.end());
  ids.push_back(Vocab::kSep);
  return MixedSequence().tokens(std::move(ids));
}

namespace graph {

ModelGraph::ModelGraph(ad::Tape& tape, const ModelParams& params, Trainable trainable)
    : tape_(&tape), params_(&params) {
  const bool base_grad = trainable == Trainable::kBase;
  const bool adapter_grad = trainable == Trainable::kAdapter;
  auto bind = [&](const Matrix& m) {
    ad::Var v = tape.external(m, base_grad);
    if (base_grad) base_vars_.push_back(v);
    return v;
  };
  // Binding order mirrors for_each_base so base_vars_ lines up with it.
  token_embedding_ = bind(params.base.token_embedding);
  position_embedding_ = bind(params.base.position_embedding);
  std::vector<std::array<ad::Var, kAdaptedPerLayer>> raw(params.base.layers.size());
  layers_.resize(params.base.layers.size());
  for (std::size_t i = 0; i < params.base.layers.size(); ++i) {
    const auto& l = params.base.layers[i];
    layers_[i].ln1_gain = bind(l.ln1_gain);
    layers_[i].ln1_bias = bind(l.ln1_bias);
    for (int m = 0; m < kAdaptedPerLayer; ++m) raw[i][static_cast<std::size_t>(m)] = bind(l.adapted(static_cast<AdaptedMatrix>(m)));
    layers_[i].ln2_gain = bind(l.ln2_gain);
    layers_[i].ln2_bias = bind(l.ln2_bias);
  }
  final_gain_ = bind(params.base.final_gain);
  final_bias_ = bind(params.base.final_bias);
  output_projection_ = bind(params.base.output_projection);

  const double s = params.shape.adapter_scale();
  for (std::size_t i = 0; i < params.base.layers.size(); ++i) {
    for (std::size_t m = 0; m < kAdaptedPerLayer; ++m) {
      const auto& fac = params.adapter.layers[i][m];
      ad::Var down = tape.external(fac.down, adapter_grad);
      ad::Var up = tape.external(fac.up, adapter_grad);
      if (adapter_grad) {
        adapter_vars_.push_back(down);
        adapter_vars_.push_back(up);
      }
      layers_[i].weights[m] = ad::low_rank_update(tape, raw[i][m], down, up, s);
    }
  }
}

ad::Var ModelGraph::embed(const TokenSeq& ids) const {
  return ad::gather_rows(*tape_, token_embedding_, ids);
}

ad::Var ModelGraph::hidden(std::span<const Segment> input) const {
  ad::Tape& t = *tape_;
  const ModelShape& shape = params_->shape;
  std::vector<ad::Var> parts;
  Eigen::Index len = 0;
  for (const auto& seg : input) {
    ad::Var part;
    if (const auto* ids = std::get_if<TokenSeq>(&seg)) {
      if (ids->empty()) continue;
      validate_ids(*ids, static_cast<std::size_t>(shape.vocab));
      part = embed(*ids);
    } else {
      part = std::get<ad::Var>(seg);
      if (t.value(part).cols() != shape.dim) {
        throw InputError("embedding block width " + std::to_string(t.value(part).cols()) +
                         " does not match model dim " + std::to_string(shape.dim));
      }
      if (t.value(part).rows() == 0) continue;
    }
    len += t.value(part).rows();
    parts.push_back(part);
  }
  if (len == 0) throw InputError("empty model input");
  if (len > shape.context) {
    throw InputError("input length " + std::to_string(len) + " exceeds context " + std::to_string(shape.context));
  }
  ad::Var x = parts.size() == 1 ? parts[0] : ad::concat_rows(t, parts);
  x = ad::add(t, x, ad::slice_rows(t, position_embedding_, 0, len));

  for (const auto& l : layers_) {
    ad::Var h = ad::layer_norm(t, x, l.ln1_gain, l.ln1_bias);
    ad::Var q = ad::matmul(t, h, l.weights[0]);
    ad::Var k = ad::matmul(t, h, l.weights[1]);
    ad::Var v = ad::matmul(t, h, l.weights[2]);
    ad::Var a = ad::causal_attention(t, q, k, v, shape.heads);
    x = ad::add(t, x, ad::matmul(t, a, l.weights[3]));
    ad::Var h2 = ad::layer_norm(t, x, l.ln2_gain, l.ln2_bias);
    ad::Var f = ad::gelu(t, ad::matmul(t, h2, l.weights[4]));
    x = ad::add(t, x, ad::matmul(t, f, l.weights[5]));
  }
  if (shape.final_norm) x = ad::layer_norm(t, x, final_gain_, final_bias_);
  return x;
}

ad::Var ModelGraph::project(ad::Var hidden_rows) const {
  return ad::matmul(*tape_, hidden_rows, output_projection_);
}

ad::Var ModelGraph::logits(std::span<const Segment> input) const { return project(hidden(input)); }

ad::Var ModelGraph::sequence_log_prob(std::span<const Segment> context, const TokenSeq& target) const {
  if (target.empty()) throw InputError("sequence_log_prob: empty target");
  validate_ids(target, static_cast<std::size_t>(params_->shape.vocab));
  std::vector<Segment> input(context.begin(), context.end());
  Eigen::Index context_len = 0;
  for (const auto& seg : context) {
    context_len += std::holds_alternative<TokenSeq>(seg)
                       ? static_cast<Eigen::Index>(std::get<TokenSeq>(seg).size())
                       : tape_->value(std::get<ad::Var>(seg)).rows();
  }
  if (context_len == 0) throw InputError("sequence_log_prob: empty context");
  if (target.size() > 1) input.emplace_back(TokenSeq(target.begin(), target.end() - 1));
  ad::Var h = hidden(input);
  ad::Var rows = ad::slice_rows(*tape_, h, context_len - 1, static_cast<Eigen::Index>(target.size()));
  return ad::target_log_prob(*tape_, project(rows), target);
}

std::vector<Segment> prompt_segments(std::optional<ad::Var> prefix, const TokenSeq& query,
                                     std::optional<ad::Var> suffix) {
  std::vector<Segment> segs;
  segs.emplace_back(TokenSeq{Vocab::kBos});
  if (prefix) segs.emplace_back(*prefix);
  segs.emplace_back(query);
  if (suffix) segs.emplace_back(*suffix);
  segs.emplace_back(TokenSeq{Vocab::kSep});
  return segs;
}

}  // namespace graph

namespace {

std::vector<graph::Segment> bind_segments(ad::Tape& tape, const MixedSequence& seq) {
  std::vector<graph::Segment> out;
  for (const auto& s : seq.segments()) {
    if (const auto* ids = std::get_if<TokenSeq>(&s)) {
      out.emplace_back(*ids);
    } else {
      out.emplace_back(tape.external(std::get<Matrix>(s), false));
    }
  }
  return out;
}

}  // namespace

Matrix embed(const TokenSeq& ids, const ModelParams& params) {
  validate_ids(ids, static_cast<std::size_t>(params.shape.vocab));
  Matrix out(static_cast<Eigen::Index>(ids.size()), params.shape.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = params.base.token_embedding.row(ids[i]);
  return out;
}

Matrix forward_logits(const MixedSequence& input, const ModelParams& params) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, graph::Trainable::kNone);
  const auto segs = bind_segments(tape, input);
  Matrix out = tape.value(g.logits(segs));
  if (!out.allFinite()) {
    params.check_finite();
    throw InternalError("forward_logits: non-finite logits");
  }
  return out;
}

double sequence_log_prob(const MixedSequence& context, const TokenSeq& target, const ModelParams& params) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, graph::Trainable::kNone);
  const auto segs = bind_segments(tape, context);
  const double v = tape.scalar(g.sequence_log_prob(segs, target));
  if (!std::isfinite(v)) {
    params.check_finite();
    throw InternalError("sequence_log_prob: non-finite value");
  }
  return v;
}

TokenSeq greedy_decode(const MixedSequence& context, int max_len, const ModelParams& params) {
  if (max_len < 1) throw InputError("greedy_decode: max_len must be >= 1");
  TokenSeq out;
  const std::size_t context_len = context.length();
  while (static_cast<int>(out.size()) < max_len && context_len + out.size() <= static_cast<std::size_t>(params.shape.context)) {
    ad::Tape tape;
    graph::ModelGraph g(tape, params, graph::Trainable::kNone);
    auto segs = bind_segments(tape, context);
    if (!out.empty()) segs.emplace_back(out);
    ad::Var h = g.hidden(segs);
    ad::Var last = ad::slice_rows(tape, h, tape.value(h).rows() - 1, 1);
    const Matrix& logits = tape.value(g.project(last));
    if (!logits.allFinite()) throw InternalError("greedy_decode: non-finite logits");
    TokenId best = 0;
    for (Eigen::Index v = 1; v < logits.cols(); ++v) {
      if (logits(0, v) > logits(0, best)) best = static_cast<TokenId>(v);
    }
    out.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return out;
}

GradientBundle differentiate(const LossBuilder& loss, const Matrix& ph, const Matrix& pt, const ModelParams& params,
                             DifferentiateOptions options) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, options.adapter ? graph::Trainable::kAdapter : graph::Trainable::kNone);
  ad::Var phv = tape.external(ph, options.perturbations);
  ad::Var ptv = tape.external(pt, options.perturbations);
  ad::Var root = loss(g, phv, ptv);
  GradientBundle out;
  out.loss_value = tape.scalar(root);
  if (!std::isfinite(out.loss_value)) {
    throw InternalError("differentiate: non-finite loss value " + std::to_string(out.loss_value));
  }
  tape.backward(root);
  auto take = [&](ad::Var v, const Matrix& like, const std::string& name) {
    const Matrix& gr = tape.grad(v);
    Matrix m = gr.size() == 0 ? Matrix::Zero(like.rows(), like.cols()) : gr;
    if (!m.allFinite()) throw InternalError("differentiate: non-finite gradient for " + name);
    return m;
  };
  if (options.perturbations) {
    out.grad_ph = take(phv, ph, "ph");
    out.grad_pt = take(ptv, pt, "pt");
  } else {
    out.grad_ph = Matrix::Zero(ph.rows(), ph.cols());
    out.grad_pt = Matrix::Zero(pt.rows(), pt.cols());
  }
  if (options.adapter) {
    std::size_t i = 0;
    params.for_each_adapter([&](const std::string& name, const Matrix& m) {
      out.grad_adapter.push_back(take(g.adapter_vars()[i++], m, name));
    });
  }
  return out;
}

ModelParams pretrain_base(std::span<const SupervisedPair> corpus, const ModelShape& shape,
                          const PretrainOptions& options) {
  if (corpus.empty()) throw InputError("pretrain_base: empty corpus");
  if (options.epochs < 0 || options.batch_size < 1) throw InputError("pretrain_base: bad epochs/batch size");
  ModelParams params = ModelParams::initialize(shape, options.seed, options.init_std, options.embedding_std);
  Rng order_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam adam(options.lr);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      ad::Tape tape;
      graph::ModelGraph g(tape, params, graph::Trainable::kBase);
      std::vector<ad::Var> terms;
      double tokens = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const SupervisedPair& ex = corpus[order[i]];
        TokenSeq target = ex.response;
        target.push_back(Vocab::kEos);
        const auto ctx = graph::prompt_segments(std::nullopt, ex.query, std::nullopt);
        terms.push_back(g.sequence_log_prob(ctx, target));
        tokens += static_cast<double>(target.size());
      }
      ad::Var loss = ad::scale(tape, ad::sum(tape, terms), -1.0 / tokens);
      if (!std::isfinite(tape.scalar(loss))) {
        throw InternalError("pretrain_base: loss diverged at epoch " + std::to_string(epoch) + ", batch starting " +
                            std::to_string(start));
      }
      tape.backward(loss);
      std::vector<Matrix*> ptrs;
      std::vector<Matrix> grads;
      std::size_t i = 0;
      params.for_each_base([&](const std::string&, Matrix& m) {
        ptrs.push_back(&m);
        grads.push_back(tape.grad(g.base_vars()[i++]));
      });
      adam.step(ptrs, grads);
    }
  }
  return params;
}

}  // namespace coeforge
