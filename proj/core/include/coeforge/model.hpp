#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "coeforge/autodiff.hpp"
#include "coeforge/tensor.hpp"

namespace coeforge {

/// Hyper-shape of the decoder. Stored verbatim in checkpoints.
struct ModelShape {
  int layers = 2;
  int heads = 4;
  int dim = 64;
  int ff_dim = 128;
  int context = 128;
  int vocab = 0;
  int adapter_rank = 4;
  /// Adapter delta is (adapter_alpha / adapter_rank) * down * up.
  int adapter_alpha = 8;
  bool final_norm = true;

  [[nodiscard]] double adapter_scale() const {
    return static_cast<double>(adapter_alpha) / static_cast<double>(adapter_rank);
  }
  void validate() const;
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Matrices in each decoder layer that carry a low-rank adapter.
enum class AdaptedMatrix : int { kQuery = 0, kKey, kValue, kOutput, kFeedForwardIn, kFeedForwardOut };
inline constexpr int kAdaptedPerLayer = 6;

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix query, key, value, output;  // C x C
  Matrix ln2_gain, ln2_bias;
  Matrix ff_in;   // C x F
  Matrix ff_out;  // F x C

  Matrix& adapted(AdaptedMatrix m);
  [[nodiscard]] const Matrix& adapted(AdaptedMatrix m) const;
};

struct BaseWeights {
  Matrix token_embedding;     // V x C
  Matrix position_embedding;  // context x C
  std::vector<LayerWeights> layers;
  Matrix final_gain, final_bias;  // 1 x C
  Matrix output_projection;       // C x V
};

/// delta = scale * down * up, down is d x r and up is r x d'.
struct LowRankFactor {
  Matrix down;
  Matrix up;
};

struct Adapter {
  std::vector<std::array<LowRankFactor, kAdaptedPerLayer>> layers;
};

/// Frozen base decoder plus its trainable low-rank adapter.
struct ModelParams {
  ModelShape shape;
  BaseWeights base;
  Adapter adapter;

  /// Random base weights (normal, std `init_std`; token and position tables std `embedding_std`), adapter
  /// down-projections random and up-projections zero.
  static ModelParams initialize(const ModelShape& shape, std::uint64_t seed, double init_std = 0.02,
                                double embedding_std = 0.1);

  void for_each_base(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each_base(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  void for_each_adapter(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each_adapter(const std::function<void(const std::string&, const Matrix&)>& fn) const;

  /// Base weight plus scaled adapter delta.
  [[nodiscard]] Matrix effective(int layer, AdaptedMatrix m) const;
  [[nodiscard]] bool adapter_is_zero() const;
  /// Throws InternalError naming the first non-finite block.
  void check_finite() const;
};

/// Model input: token-id runs and raw embedding blocks, in order.
/// Embedding blocks enter after the token table and must be dim wide.
class MixedSequence {
 public:
  using Segment = std::variant<TokenSeq, Matrix>;

  MixedSequence() = default;
  MixedSequence& tokens(TokenSeq ids);
  MixedSequence& embeddings(Matrix block);

  [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }
  [[nodiscard]] std::size_t length() const;

 private:
  std::vector<Segment> segments_;
};

/// Chat layout used everywhere: <bos> [prefix] query [suffix] <sep>, response follows.
MixedSequence prompt_sequence(const Matrix* prefix, const TokenSeq& query, const Matrix* suffix);
MixedSequence prompt_sequence(const TokenSeq& query, const TokenSeq& suffix = {});

namespace graph {

using Segment = std::variant<TokenSeq, ad::Var>;

enum class Trainable { kNone, kAdapter, kBase };

/// Model weights bound onto a tape. Frozen weights are aliased, never copied.
class ModelGraph {
 public:
  ModelGraph(ad::Tape& tape, const ModelParams& params, Trainable trainable);

  [[nodiscard]] ad::Tape& tape() const { return *tape_; }
  [[nodiscard]] const ModelParams& params() const { return *params_; }

  [[nodiscard]] ad::Var embed(const TokenSeq& ids) const;
  /// Final hidden states (after the final norm), L x C.
  [[nodiscard]] ad::Var hidden(std::span<const Segment> input) const;
  [[nodiscard]] ad::Var project(ad::Var hidden_rows) const;
  [[nodiscard]] ad::Var logits(std::span<const Segment> input) const;
  /// Teacher-forced sum of log p(target[t] | context, target[<t]), as 1x1.
  [[nodiscard]] ad::Var sequence_log_prob(std::span<const Segment> context, const TokenSeq& target) const;

  /// Adapter leaves in for_each_adapter order; empty unless Trainable::kAdapter.
  [[nodiscard]] const std::vector<ad::Var>& adapter_vars() const { return adapter_vars_; }
  /// Base leaves in for_each_base order; empty unless Trainable::kBase.
  [[nodiscard]] const std::vector<ad::Var>& base_vars() const { return base_vars_; }

 private:
  struct LayerVars {
    ad::Var ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    std::array<ad::Var, kAdaptedPerLayer> weights;
  };

  ad::Tape* tape_;
  const ModelParams* params_;
  ad::Var token_embedding_, position_embedding_, final_gain_, final_bias_, output_projection_;
  std::vector<LayerVars> layers_;
  std::vector<ad::Var> adapter_vars_;
  std::vector<ad::Var> base_vars_;
};

std::vector<Segment> prompt_segments(std::optional<ad::Var> prefix, const TokenSeq& query,
                                     std::optional<ad::Var> suffix);

}  // namespace graph

/// Row i is token-table row ids[i].
Matrix embed(const TokenSeq& ids, const ModelParams& params);
Matrix forward_logits(const MixedSequence& input, const ModelParams& params);
double sequence_log_prob(const MixedSequence& context, const TokenSeq& target, const ModelParams& params);
/// Appends argmax tokens (lowest id on ties) until <eos> (included) or max_len tokens.
TokenSeq greedy_decode(const MixedSequence& context, int max_len, const ModelParams& params);

/// Gradients of one scalar loss.
struct GradientBundle {
  Matrix grad_ph;
  Matrix grad_pt;
  /// Same order and shapes as ModelParams::for_each_adapter; empty when not requested.
  std::vector<Matrix> grad_adapter;
  double loss_value = 0.0;
};

struct DifferentiateOptions {
  bool perturbations = true;
  bool adapter = true;
};

/// Builds a scalar loss from the bound model and the two perturbation leaves.
using LossBuilder = std::function<ad::Var(const graph::ModelGraph&, ad::Var ph, ad::Var pt)>;

/// Exact reverse-mode gradients of `loss` with respect to the perturbation pair and the
/// adapter. Base weights are bound frozen. Throws InternalError on a non-finite loss or
/// gradient.
GradientBundle differentiate(const LossBuilder& loss, const Matrix& ph, const Matrix& pt,
                             const ModelParams& params, DifferentiateOptions options = {});

/// One supervised (query -> response) example for base pretraining.
struct SupervisedPair {
  TokenSeq query;
  TokenSeq response;
};

struct PretrainOptions {
  int epochs = 30;
  double lr = 3e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double embedding_std = 0.1;
};

/// Trains every base weight by teacher-forced NLL of response + <eos> on the prompt layout.
/// Adapter is left with zero up-projections. Deterministic for a fixed seed.
ModelParams pretrain_base(std::span<const SupervisedPair> corpus, const ModelShape& shape,
                          const PretrainOptions& options);

}  // namespace coeforge
