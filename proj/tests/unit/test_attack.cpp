#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "coeforge/attack.hpp"
#include "coeforge/defense.hpp"
#include "coeforge/errors.hpp"
#include "coeforge_cli/pipeline.hpp"
#include "oracle.hpp"

using namespace coeforge;

namespace {

ModelParams small_model(std::uint64_t seed) {
  ModelShape s;
  s.layers = 1;
  s.heads = 2;
  s.dim = 8;
  s.ff_dim = 12;
  s.context = 48;
  s.vocab = 16;
  ModelParams p = ModelParams::initialize(s, seed, 0.3, 0.5);
  Rng r(seed + 17);
  p.for_each_adapter([&](const std::string&, Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.normal(0.0, 0.2);
  });
  return p;
}

PerturbationPair random_pair(const ModelParams& p, int K, std::uint64_t seed) {
  Rng r(seed);
  return init_perturbations(p, K, r);
}

std::vector<QueryTriple> swapped(std::vector<QueryTriple> batch) {
  for (auto& t : batch) std::swap(t.affirm, t.refuse);
  return batch;
}

}  // namespace

TEST(AttackInit, RowsCopyTokenTableInDrawOrder) {
  const ModelParams p = small_model(1);
  Rng a(42), ref(42);
  const PerturbationPair pair = init_perturbations(p, 3, a);
  for (int r = 0; r < 3; ++r) EXPECT_TRUE(pair.ph.row(r) == p.base.token_embedding.row(static_cast<Eigen::Index>(ref.uniform_index(16))));
  for (int r = 0; r < 3; ++r) EXPECT_TRUE(pair.pt.row(r) == p.base.token_embedding.row(static_cast<Eigen::Index>(ref.uniform_index(16))));
  EXPECT_EQ(a.next_u64(), ref.next_u64());
  EXPECT_THROW(init_perturbations(p, 0, a), InputError);
}

TEST(AttackLosses, MatchOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelParams p = oracle::zero_layer_model(4, 3, seed, seed % 2 == 0);
    const auto batch = oracle::random_triples(4, 3, seed + 50);
    const PerturbationPair pair = random_pair(p, 2, seed);
    const auto o = oracle::pair_log_probs(p, batch, &pair.ph, &pair.pt);
    const double target = oracle::neg_sum(o.logp_affirm);
    const double contra = oracle::contrastive(o.logp_affirm, o.logp_refuse);
    EXPECT_NEAR(attack_target_loss(batch, pair, p), target, 1e-10);
    EXPECT_NEAR(attack_contrastive_loss(batch, pair, p), contra, 1e-10);
    EXPECT_NEAR(attack_loss(batch, pair, p, 0.3), target + 0.3 * contra, 1e-10);
  }
}

TEST(AttackLosses, LambdaZeroCollapsesToTarget) {
  const ModelParams p = small_model(2);
  const auto batch = oracle::random_triples(16, 4, 2);
  const PerturbationPair pair = random_pair(p, 2, 2);
  EXPECT_NEAR(attack_loss(batch, pair, p, 0.0), attack_target_loss(batch, pair, p), 1e-12);
}

TEST(AttackLosses, IdenticalResponsesGiveLn2PerSample) {
  const ModelParams p = small_model(3);
  auto batch = oracle::random_triples(16, 5, 3);
  for (auto& t : batch) t.refuse = t.affirm;
  const PerturbationPair pair = random_pair(p, 2, 3);
  EXPECT_NEAR(attack_contrastive_loss(batch, pair, p), 5.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(defense_contrastive_loss(batch, pair, p), 5.0 * std::log(2.0), 1e-12);
}

TEST(AttackLosses, SwapSymmetryWithDefense) {
  const ModelParams p = small_model(4);
  const auto batch = oracle::random_triples(16, 4, 4);
  const PerturbationPair pair = random_pair(p, 2, 4);
  EXPECT_NEAR(attack_contrastive_loss(batch, pair, p), defense_contrastive_loss(swapped(batch), pair, p), 1e-12);
  EXPECT_NEAR(attack_target_loss(batch, pair, p), defense_target_loss(swapped(batch), pair, p), 1e-12);
}

TEST(AttackOptimize, TrajectoryShapeAndStepZero) {
  const ModelParams p = small_model(5);
  const auto batch = oracle::random_triples(16, 3, 5);
  AttackConfig c;
  c.K = 2;
  c.M = 4;
  Rng r(9), init_rng(9);
  const AttackResult res = optimize_perturbations(batch, p, c, r);
  ASSERT_EQ(res.trajectory.size(), 5u);
  for (int m = 0; m < 5; ++m) EXPECT_EQ(res.trajectory[static_cast<std::size_t>(m)].step, m);
  EXPECT_EQ(res.pair.step, 4);
  const PerturbationPair init = init_perturbations(p, 2, init_rng);
  EXPECT_NEAR(res.trajectory[0].loss, attack_loss(batch, init, p, c.lambda), 1e-12);
  EXPECT_NEAR(res.trajectory[4].loss, attack_loss(batch, res.pair, p, c.lambda), 1e-12);
}

TEST(AttackOptimize, ZeroStepsAndZeroEpsilonKeepInit) {
  const ModelParams p = small_model(6);
  const auto batch = oracle::random_triples(16, 2, 6);
  AttackConfig c;
  c.K = 2;
  c.M = 0;
  Rng r1(1), r2(1);
  const AttackResult a = optimize_perturbations(batch, p, c, r1);
  EXPECT_EQ(a.trajectory.size(), 1u);
  const PerturbationPair init = init_perturbations(p, 2, r2);
  EXPECT_TRUE(a.pair.ph == init.ph);
  c.M = 3;
  c.epsilon = 0.0;
  Rng r3(1);
  const AttackResult b = optimize_perturbations(batch, p, c, r3);
  EXPECT_TRUE(b.pair.ph == init.ph);
  EXPECT_TRUE(b.pair.pt == init.pt);
  c.M = -1;
  EXPECT_THROW(optimize_perturbations(batch, p, c, r3), InputError);
  c.M = 1;
  EXPECT_THROW(optimize_perturbations({}, p, c, r3), InputError);
}

TEST(AttackOptimize, OneStepIsGradientDescentAgainstFiniteDifferences) {
  const ModelParams p = small_model(7);
  const auto batch = oracle::random_triples(16, 2, 7);
  AttackConfig c;
  c.K = 2;
  c.M = 1;
  c.epsilon = 0.05;
  Rng r(11), init_rng(11);
  const AttackResult res = optimize_perturbations(batch, p, c, r);
  PerturbationPair pair = init_perturbations(p, 2, init_rng);
  const PerturbationPair init = pair;
  const Matrix gh = oracle::central_difference(pair.ph, [&] { return attack_loss(batch, pair, p, c.lambda); });
  const Matrix gt = oracle::central_difference(pair.pt, [&] { return attack_loss(batch, pair, p, c.lambda); });
  EXPECT_LT((res.pair.ph - (init.ph - c.epsilon * gh)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((res.pair.pt - (init.pt - c.epsilon * gt)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(AttackOptimize, DroppedSiteStaysAtInit) {
  const ModelParams p = small_model(8);
  const auto batch = oracle::random_triples(16, 2, 8);
  AttackConfig c;
  c.K = 2;
  c.M = 3;
  c.epsilon = 0.05;
  c.sites.prefix = false;
  Rng r(2), init_rng(2);
  const AttackResult res = optimize_perturbations(batch, p, c, r);
  const PerturbationPair init = init_perturbations(p, 2, init_rng);
  EXPECT_TRUE(res.pair.ph == init.ph);
  EXPECT_FALSE(res.pair.pt == init.pt);
}

TEST(AttackOptimize, SmallStepLowersLossAndModelUntouched) {
  const ModelParams p = small_model(9);
  const std::string before = [&] {
    std::string s;
    p.for_each_base([&](const std::string&, const Matrix& m) { s.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size())); });
    return s;
  }();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto batch = oracle::random_triples(16, 3, 100 + seed);
    AttackConfig c;
    c.K = 2;
    c.M = 10;
    c.epsilon = 1e-4;
    Rng r(seed);
    const AttackResult res = optimize_perturbations(batch, p, c, r);
    EXPECT_LT(res.trajectory.back().loss, res.trajectory.front().loss);
  }
  std::string after;
  p.for_each_base([&](const std::string&, const Matrix& m) { after.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size())); });
  EXPECT_EQ(before, after);
}

TEST(AttackOptimize, DeterministicForSeed) {
  const ModelParams p = small_model(10);
  const auto batch = oracle::random_triples(16, 3, 10);
  AttackConfig c;
  c.K = 2;
  c.M = 3;
  Rng a(5), b(5);
  const auto x = optimize_perturbations(batch, p, c, a), y = optimize_perturbations(batch, p, c, b);
  EXPECT_TRUE(x.pair.ph == y.pair.ph);
  EXPECT_TRUE(x.pair.pt == y.pair.pt);
}

TEST(AttackTrajectoryCsv, RoundTrip) {
  const AttackTrajectory t = {{0, 1.5, -2.25, -3.0}, {1, 1.25, -2.0, -3.5}};
  const auto path = std::filesystem::temp_directory_path() / "coeforge_attack_traj.csv";
  write_attack_trajectory_csv(t, path);
  const AttackTrajectory back = cli::read_attack_trajectory_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].step, 1);
  EXPECT_EQ(back[1].loss, 1.25);
  EXPECT_EQ(back[1].mean_logp_affirm, -2.0);
  EXPECT_EQ(back[1].mean_logp_refuse, -3.5);
}
