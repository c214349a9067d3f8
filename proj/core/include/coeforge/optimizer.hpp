#pragma once

#include <vector>

#include "coeforge/tensor.hpp"

namespace coeforge {

/// Adam with bias correction. Moment state persists across `step` calls and is keyed by
/// parameter position, so callers must pass parameters in a stable order.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// An empty gradient entry counts as all-zero.
  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);

  [[nodiscard]] long steps_taken() const { return t_; }
  [[nodiscard]] double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace coeforge
