#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coeforge/autodiff.hpp"
#include "coeforge/errors.hpp"
#include "oracle.hpp"

using namespace coeforge;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(g);
  return m;
}

using OpFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Scalar head that mixes every output entry non-linearly so upstream gradients are dense.
double run(const OpFn& op, std::vector<Matrix>& inputs, const Matrix& mix, std::vector<Matrix>* grads) {
  ad::Tape t;
  std::vector<ad::Var> vars;
  for (auto& m : inputs) vars.push_back(t.external(m, true));
  ad::Var out = op(t, vars);
  ad::Var loss = ad::sum(t, ad::gelu(t, ad::matmul(t, out, t.constant(mix.topRows(t.value(out).cols())))));
  const double v = t.scalar(loss);
  if (grads != nullptr) {
    t.backward(loss);
    grads->clear();
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Matrix& g = t.grad(vars[i]);
      grads->push_back(g.size() == 0 ? Matrix::Zero(inputs[i].rows(), inputs[i].cols()) : g);
    }
  }
  return v;
}

void check_op(const OpFn& op, std::vector<Matrix> inputs, double tol = 1e-6) {
  const Matrix mix = random_matrix(64, 3, 99);
  std::vector<Matrix> analytic;
  run(op, inputs, mix, &analytic);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix numeric = oracle::central_difference(inputs[i], [&] { return run(op, inputs, mix, nullptr); });
    EXPECT_LT(oracle::max_relative_error(analytic[i], numeric, 1e-6), tol) << "input " << i;
  }
}

}  // namespace

TEST(Autodiff, MatmulAddSubScale) {
  check_op([](ad::Tape& t, const auto& v) { return ad::matmul(t, v[0], v[1]); }, {random_matrix(3, 4, 1), random_matrix(4, 5, 2)});
  check_op([](ad::Tape& t, const auto& v) { return ad::add(t, v[0], v[1]); }, {random_matrix(3, 4, 1), random_matrix(3, 4, 2)});
  check_op([](ad::Tape& t, const auto& v) { return ad::sub(t, v[0], v[1]); }, {random_matrix(3, 4, 1), random_matrix(3, 4, 2)});
  check_op([](ad::Tape& t, const auto& v) { return ad::scale(t, v[0], -1.7); }, {random_matrix(2, 3, 5)});
}

TEST(Autodiff, LowRankUpdate) {
  check_op([](ad::Tape& t, const auto& v) { return ad::low_rank_update(t, v[0], v[1], v[2], 2.0); },
           {random_matrix(4, 5, 1), random_matrix(4, 2, 2), random_matrix(2, 5, 3)});
}

TEST(Autodiff, RowOps) {
  check_op([](ad::Tape& t, const auto& v) { return ad::concat_rows(t, std::vector<ad::Var>{v[0], v[1]}); },
           {random_matrix(2, 3, 1), random_matrix(3, 3, 2)});
  check_op([](ad::Tape& t, const auto& v) { return ad::slice_rows(t, v[0], 1, 2); }, {random_matrix(4, 3, 1)});
  const TokenSeq ids = {2, 0, 2, 1};
  check_op([&](ad::Tape& t, const auto& v) { return ad::gather_rows(t, v[0], ids); }, {random_matrix(3, 4, 7)});
}

TEST(Autodiff, LayerNormAndGelu) {
  check_op([](ad::Tape& t, const auto& v) { return ad::layer_norm(t, v[0], v[1], v[2]); },
           {random_matrix(3, 6, 1), random_matrix(1, 6, 2), random_matrix(1, 6, 3)}, 1e-5);
  check_op([](ad::Tape& t, const auto& v) { return ad::gelu(t, v[0]); }, {random_matrix(3, 4, 4, 2.0)}, 1e-5);
}

TEST(Autodiff, CausalAttention) {
  check_op([](ad::Tape& t, const auto& v) { return ad::causal_attention(t, v[0], v[1], v[2], 2); },
           {random_matrix(4, 6, 1), random_matrix(4, 6, 2), random_matrix(4, 6, 3)});
}

TEST(Autodiff, TargetLogProbAndLogSigmoid) {
  const TokenSeq targets = {1, 3, 0};
  check_op([&](ad::Tape& t, const auto& v) { return ad::target_log_prob(t, v[0], targets); }, {random_matrix(3, 4, 1, 3.0)});
  check_op([](ad::Tape& t, const auto& v) { return ad::log_sigmoid(t, v[0]); }, {random_matrix(2, 3, 2, 5.0)});
}

TEST(Autodiff, TargetLogProbValue) {
  ad::Tape t;
  Matrix logits(2, 3);
  logits << 1.0, 2.0, 3.0, 0.5, 0.5, 0.5;
  const TokenSeq targets = {2, 1};
  const double got = t.scalar(ad::target_log_prob(t, t.constant(logits), targets));
  const double expect = std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) + std::log(1.0 / 3.0);
  EXPECT_NEAR(got, expect, 1e-14);
}

TEST(Autodiff, SoftplusStable) {
  EXPECT_NEAR(ad::softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(ad::softplus(800.0), 800.0, 1e-12);
  EXPECT_GT(ad::softplus(-800.0), -1.0);
  EXPECT_LT(ad::softplus(-800.0), 1e-300);
  ad::Tape t;
  Matrix x(1, 1);
  x << -1000.0;
  EXPECT_NEAR(t.scalar(ad::log_sigmoid(t, t.constant(x))), -1000.0, 1e-9);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  ad::Tape t;
  const Matrix frozen = random_matrix(2, 2, 3);
  ad::Var w = t.external(frozen, false);
  ad::Var p = t.parameter(random_matrix(2, 2, 4));
  ad::Var loss = ad::sum(t, ad::matmul(t, w, p));
  t.backward(loss);
  EXPECT_EQ(t.grad(w).size(), 0);
  EXPECT_EQ(t.grad(p).rows(), 2);
}

TEST(Autodiff, NonFiniteRootThrows) {
  ad::Tape t;
  Matrix x(1, 1);
  x << std::nan("");
  ad::Var p = t.parameter(x);
  EXPECT_THROW(t.backward(ad::sum(t, p)), InternalError);
}
