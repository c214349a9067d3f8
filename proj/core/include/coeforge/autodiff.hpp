#pragma once

#include <functional>
#include <span>
#include <vector>

#include "coeforge/tensor.hpp"

namespace coeforge::ad {

/// Handle to a node recorded on a Tape. Only meaningful together with that tape.
struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices.
///
/// Nodes are appended in evaluation order, so a single reverse sweep is a valid
/// topological order. A node tracks gradients iff one of its inputs does; leaves
/// created with `constant` or `external` never receive gradient, which is how
/// frozen weights stay frozen.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Matrix value);
  /// Leaf that aliases caller-owned storage; the matrix must outlive the tape.
  Var external(const Matrix& value, bool requires_grad);

  [[nodiscard]] const Matrix& value(Var v) const;
  /// Gradient of the last `backward` root with respect to v; empty if none reached it.
  [[nodiscard]] const Matrix& grad(Var v) const;
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  [[nodiscard]] double scalar(Var v) const;
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and sweeps backwards.
  void backward(Var root);

  // Used by op implementations.
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* alias = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double factor);
/// w + factor * down * up, the merged weight of a low-rank adapter.
Var low_rank_update(Tape& t, Var w, Var down, Var up, double factor);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var slice_rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count);
/// Row i of the result is row ids[i] of table. Scatter-adds into the table on backward.
Var gather_rows(Tape& t, Var table, std::span<const TokenId> ids);
/// Row-wise layer normalisation with affine 1xC gain and bias.
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
/// tanh approximation of GELU.
Var gelu(Tape& t, Var x);
/// Multi-head causal self-attention on pre-projected q, k, v (each L x C).
Var causal_attention(Tape& t, Var q, Var k, Var v, int heads);
/// 1x1 sum over rows r of log_softmax(logits.row(r))[targets[r]].
Var target_log_prob(Tape& t, Var logits, std::span<const TokenId> targets);
/// Elementwise log(sigmoid(x)) = -softplus(-x), stable for large |x|.
Var log_sigmoid(Tape& t, Var x);
/// Sum of all entries, as 1x1.
Var sum(Tape& t, Var a);
Var sum(Tape& t, std::span<const Var> scalars);

/// Numerically stable softplus log(1 + exp(x)).
double softplus(double x);

}  // namespace coeforge::ad
