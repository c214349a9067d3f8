#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "coeforge/corpus.hpp"
#include "coeforge/model.hpp"
#include "coeforge/objectives.hpp"
#include "coeforge/rng.hpp"

namespace coeforge {

/// Prefix (image surrogate) and suffix (text-suffix surrogate) embedding blocks, each K x C.
struct PerturbationPair {
  Matrix ph;
  Matrix pt;
  int step = 0;
};

struct AttackStep {
  int step = 0;
  double loss = 0.0;
  double mean_logp_affirm = 0.0;
  double mean_logp_refuse = 0.0;
};

/// One entry per attack step, step 0 included.
using AttackTrajectory = std::vector<AttackStep>;

struct AttackConfig {
  int K = 8;
  int M = 40;
  double epsilon = 1e-3;
  double lambda = 0.1;
  PerturbationSites sites;
  ObjectiveTerms terms;
};

/// Each of the 2K rows copies the token-table row of an independently drawn uniform id
/// (prefix rows first). rng.uniform_index(V) is called exactly 2K times.
PerturbationPair init_perturbations(const ModelParams& params, int K, Rng& rng);

double attack_target_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params);
double attack_contrastive_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair,
                               const ModelParams& params);
double attack_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params,
                   double lambda);

struct AttackResult {
  PerturbationPair pair;
  AttackTrajectory trajectory;
};

/// Plain gradient descent on both matrices jointly for M steps from a fresh init; the
/// model is read-only. Throws InternalError naming the step on a non-finite gradient.
AttackResult optimize_perturbations(std::span<const QueryTriple> batch, const ModelParams& params,
                                    const AttackConfig& config, Rng& rng);

/// CSV with header step,m_loss,mean_logp_c,mean_logp_r.
void write_attack_trajectory_csv(const AttackTrajectory& trajectory, const std::filesystem::path& path);

}  // namespace coeforge
