#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coeforge/attack.hpp"
#include "coeforge/config.hpp"
#include "coeforge/corpus.hpp"
#include "coeforge/model.hpp"
#include "coeforge/optimizer.hpp"

namespace coeforge {

/// Every scalar of the adversarial tuning loop. Key names in config files match the
/// field names exactly.
struct TrainConfig {
  double lambda = 0.1;
  double epsilon = 1e-3;
  int M = 40;
  int T = 250;
  int N = 4;
  int H = 4;
  int K = 8;
  double outer_lr = 1e-3;
  int adapter_rank = 4;
  std::uint64_t seed_corpus = 0;
  std::uint64_t seed_model = 0;
  std::uint64_t seed_train = 0;
  std::string corpus_dir = "corpus";
  /// Checkpoint and attack-trajectory cadence, in outer iterations.
  int checkpoint_every = 50;
  /// When false the metrics `seconds` column is written as 0 so reruns are byte-identical.
  bool record_wall_time = false;

  void validate() const;
  static TrainConfig from_key_values(const KeyValues& kv);
  [[nodiscard]] KeyValues to_key_values() const;
  [[nodiscard]] AttackConfig attack_config() const;
};

/// Table-2 style component removals.
struct AblationSwitches {
  bool drop_ph = false;
  bool drop_pt = false;
  bool drop_target = false;
  bool drop_contra = false;
  bool drop_utility = false;

  /// Throws ConfigError when every defense loss or every perturbation site is removed.
  void validate() const;
  [[nodiscard]] bool any() const { return drop_ph || drop_pt || drop_target || drop_contra || drop_utility; }
  [[nodiscard]] PerturbationSites sites() const { return {!drop_ph, !drop_pt}; }
  [[nodiscard]] ObjectiveTerms terms() const { return {!drop_target, !drop_contra}; }
  /// Comma-separated names: drop_ph, drop_pt, drop_target, drop_contra, drop_utility.
  static AblationSwitches parse(const std::string& list);
  [[nodiscard]] std::string to_string() const;
};

struct IterationRecord {
  int iteration = 0;
  double attack_loss_final = 0.0;
  double def_target = 0.0;
  double def_contra = 0.0;
  double def_total = 0.0;
  double utility = 0.0;
  /// Mean log-probs under the just-updated adapter, same P_M.
  double logp_refuse = 0.0;
  double logp_affirm = 0.0;
  double seconds = 0.0;
};

double defense_target_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params);
double defense_contrastive_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair,
                                const ModelParams& params);
double defense_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params,
                    double lambda);
double utility_loss(std::span<const BenignPair> batch, const ModelParams& params);

struct DefenseStepResult {
  double def_target = 0.0;
  double def_contra = 0.0;
  double def_total = 0.0;
  double utility = 0.0;
};

/// One optimizer step on the adapter only, minimising L_def + L_utility with the pair
/// held constant. Loss values are those before the update.
DefenseStepResult defense_step(ModelParams& params, std::span<const QueryTriple> batch,
                               std::span<const BenignPair> benign, const PerturbationPair& pair, double lambda,
                               Adam& optimizer, const AblationSwitches& switches = {});

struct TuningResult {
  ModelParams params;
  std::vector<IterationRecord> records;
  /// Attack trajectories at iteration 1 and every checkpoint_every iterations.
  std::map<int, AttackTrajectory> trajectories;
};

struct RunHooks {
  std::function<void(const IterationRecord&)> on_record;
  std::function<void(int iteration, const ModelParams&)> on_checkpoint;
};

/// Alternates fresh CoE attacks and adapter updates for T iterations. Failures are
/// rethrown as InternalError prefixed with the iteration index.
TuningResult run_safemllm(const TrainConfig& config, const CorpusSplit& corpus, const ModelParams& base,
                          const RunHooks& hooks = {});
TuningResult ablation_variant(const TrainConfig& config, const CorpusSplit& corpus, const ModelParams& base,
                              const AblationSwitches& switches, const RunHooks& hooks = {});

/// Header iter,attack_loss_final,def_target,def_contra,def_total,utility,logp_r,logp_c,seconds.
std::string metrics_csv_header();
std::string metrics_csv_row(const IterationRecord& r);
void write_metrics_csv(std::span<const IterationRecord> records, const std::filesystem::path& path);
std::vector<IterationRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace coeforge
