#pragma once

// Independent reference computations for tests. Nothing here calls the library's
// forward pass or loss code; the oracle reads raw weights and works with plain loops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "coeforge/corpus.hpp"
#include "coeforge/model.hpp"

namespace oracle {

using Row = std::vector<double>;

/// 0-layer model with random, well-spread tables so softmax outputs are far from uniform.
inline coeforge::ModelParams zero_layer_model(int vocab, int dim, std::uint64_t seed, bool final_norm = false,
                                              int context = 24) {
  coeforge::ModelShape s;
  s.layers = 0;
  s.heads = 1;
  s.dim = dim;
  s.ff_dim = 4;
  s.context = context;
  s.vocab = vocab;
  s.final_norm = final_norm;
  coeforge::ModelParams p = coeforge::ModelParams::initialize(s, seed);
  std::mt19937_64 gen(seed * 7919 + 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto fill = [&](coeforge::Matrix& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * nd(gen);
  };
  fill(p.base.token_embedding, 1.0);
  fill(p.base.position_embedding, 0.5);
  fill(p.base.output_projection, 1.0);
  if (final_norm) {
    fill(p.base.final_gain, 0.3);
    p.base.final_gain.array() += 1.0;
    fill(p.base.final_bias, 0.2);
  }
  return p;
}

/// Input rows for a context: token rows come straight from the table.
struct Context {
  std::vector<Row> rows;

  void tokens(const coeforge::ModelParams& p, const coeforge::TokenSeq& ids) {
    for (auto id : ids) {
      Row r(static_cast<std::size_t>(p.shape.dim));
      for (int c = 0; c < p.shape.dim; ++c) r[static_cast<std::size_t>(c)] = p.base.token_embedding(id, c);
      rows.push_back(r);
    }
  }
  void block(const coeforge::Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      Row r(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) r[static_cast<std::size_t>(c)] = m(i, c);
      rows.push_back(r);
    }
  }
};

/// Logits of a 0-layer model at position `pos` for input row `x`.
inline Row logits_at(const coeforge::ModelParams& p, const Row& x, int pos) {
  const int C = p.shape.dim;
  Row h(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) h[static_cast<std::size_t>(c)] = x[static_cast<std::size_t>(c)] + p.base.position_embedding(pos, c);
  if (p.shape.final_norm) {
    double mean = 0.0;
    for (double v : h) mean += v;
    mean /= C;
    double var = 0.0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= C;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int c = 0; c < C; ++c) {
      auto& v = h[static_cast<std::size_t>(c)];
      v = (v - mean) * inv * p.base.final_gain(0, c) + p.base.final_bias(0, c);
    }
  }
  Row out(static_cast<std::size_t>(p.shape.vocab), 0.0);
  for (int v = 0; v < p.shape.vocab; ++v) {
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(v)] += h[static_cast<std::size_t>(c)] * p.base.output_projection(c, v);
  }
  return out;
}

inline Row softmax(const Row& l) {
  Row e(l.size());
  double z = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    e[i] = std::exp(l[i]);
    z += e[i];
  }
  for (auto& v : e) v /= z;
  return e;
}

/// log of the product of stepwise probabilities under teacher forcing.
inline double sequence_log_prob(const coeforge::ModelParams& p, Context ctx, const coeforge::TokenSeq& target) {
  double prod = 1.0;
  for (auto tok : target) {
    const int pos = static_cast<int>(ctx.rows.size()) - 1;
    prod *= softmax(logits_at(p, ctx.rows.back(), pos))[static_cast<std::size_t>(tok)];
    ctx.tokens(p, {tok});
  }
  return std::log(prod);
}

/// Greedy decode by scanning every token's probability; ties go to the lowest id.
inline coeforge::TokenSeq greedy(const coeforge::ModelParams& p, Context ctx, int max_len) {
  coeforge::TokenSeq out;
  while (static_cast<int>(out.size()) < max_len) {
    const Row pr = softmax(logits_at(p, ctx.rows.back(), static_cast<int>(ctx.rows.size()) - 1));
    int best = 0;
    for (int v = 1; v < p.shape.vocab; ++v) {
      if (pr[static_cast<std::size_t>(v)] > pr[static_cast<std::size_t>(best)]) best = v;
    }
    out.push_back(best);
    if (best == coeforge::Vocab::kEos) break;
    ctx.tokens(p, {best});
  }
  return out;
}

/// Chat layout <bos> [ph] query [pt] <sep>.
inline Context prompt(const coeforge::ModelParams& p, const coeforge::Matrix* ph, const coeforge::TokenSeq& q,
                      const coeforge::Matrix* pt) {
  Context c;
  c.tokens(p, {coeforge::Vocab::kBos});
  if (ph) c.block(*ph);
  c.tokens(p, q);
  if (pt) c.block(*pt);
  c.tokens(p, {coeforge::Vocab::kSep});
  return c;
}

inline double log_sigmoid(double x) { return std::log(1.0 / (1.0 + std::exp(-x))); }

struct PairOracle {
  std::vector<double> logp_affirm, logp_refuse;
};

inline PairOracle pair_log_probs(const coeforge::ModelParams& p, const std::vector<coeforge::QueryTriple>& batch,
                                 const coeforge::Matrix* ph, const coeforge::Matrix* pt) {
  PairOracle o;
  for (const auto& t : batch) {
    o.logp_affirm.push_back(sequence_log_prob(p, prompt(p, ph, t.query, pt), t.affirm));
    o.logp_refuse.push_back(sequence_log_prob(p, prompt(p, ph, t.query, pt), t.refuse));
  }
  return o;
}

inline double neg_sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s -= x;
  return s;
}

inline double contrastive(const std::vector<double>& preferred, const std::vector<double>& rejected) {
  double s = 0.0;
  for (std::size_t i = 0; i < preferred.size(); ++i) s -= log_sigmoid(preferred[i] - rejected[i]);
  return s;
}

/// Central difference of f at every entry of m.
inline coeforge::Matrix central_difference(coeforge::Matrix& m, const std::function<double()>& f, double h = 1e-5) {
  coeforge::Matrix g(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double orig = m.data()[i];
    m.data()[i] = orig + h;
    const double up = f();
    m.data()[i] = orig - h;
    const double down = f();
    m.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Largest |a - n| / max(|a|, |n|, floor) over all entries.
inline double max_relative_error(const coeforge::Matrix& a, const coeforge::Matrix& n, double floor = 1e-4) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - n.data()[i]);
    worst = std::max(worst, d / std::max({std::abs(a.data()[i]), std::abs(n.data()[i]), floor}));
  }
  return worst;
}

/// Random triples over a V-token vocabulary.
inline std::vector<coeforge::QueryTriple> random_triples(int vocab, int n, std::uint64_t seed, int max_len = 3) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::uniform_int_distribution<int> len(1, max_len);
  std::vector<coeforge::QueryTriple> out;
  for (int i = 0; i < n; ++i) {
    coeforge::QueryTriple t;
    for (int k = len(gen); k > 0; --k) t.query.push_back(tok(gen));
    for (int k = len(gen); k > 0; --k) t.affirm.push_back(tok(gen));
    do {
      t.refuse.clear();
      for (int k = len(gen); k > 0; --k) t.refuse.push_back(tok(gen));
    } while (t.refuse == t.affirm);
    out.push_back(t);
  }
  return out;
}

}  // namespace oracle
