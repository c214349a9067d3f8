#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coeforge/config.hpp"
#include "coeforge/corpus.hpp"
#include "coeforge/defense.hpp"
#include "coeforge/eval.hpp"
#include "coeforge/model.hpp"

namespace coeforge::cli {

/// Every knob of the pipeline. TrainConfig keys keep their own names; the rest are
/// listed in pipeline.cpp. Unknown keys are rejected.
struct PipelineConfig {
  TrainConfig train;
  CorpusOptions corpus;
  ModelShape shape;
  PretrainOptions pretrain;
  PrefixAttackOptions prefix;
  SuffixAttackOptions suffix;
  int max_decode = 12;
  int attack_train_queries = kAttackTrainQueries;

  static PipelineConfig from_key_values(const KeyValues& kv);
  [[nodiscard]] KeyValues to_key_values() const;
  void validate() const;
};

CorpusSplit make_corpus(const PipelineConfig& cfg);
ModelParams pretrain_model(const PipelineConfig& cfg, const CorpusSplit& corpus);

/// Universal attack against `params`, trained on the first attack_train_queries held-out queries.
AttackArtifact train_attack(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& corpus,
                            ArtifactKind kind);
/// ASR on the scored held-out queries plus held-out benign NLL.
EvalReport evaluate(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& corpus,
                    const AttackArtifact& artifact, int threads, const std::string& checkpoint_id);

/// Worker cap from COEFORGE_THREADS, else the hardware concurrency.
int eval_threads();

std::string sha256_file(const std::filesystem::path& path);

/// Reads the CSV written by write_attack_trajectory_csv.
AttackTrajectory read_attack_trajectory_csv(const std::filesystem::path& path);

}  // namespace coeforge::cli
