#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coeforge/attack.hpp"
#include "coeforge/corpus.hpp"
#include "coeforge/model.hpp"
#include "coeforge/rng.hpp"

namespace coeforge {

enum class ArtifactKind { kPrefixEmbedding, kDiscreteSuffix };

std::string to_string(ArtifactKind kind);
/// Accepts "prefix" / "suffix" as well as the full kind names.
ArtifactKind parse_artifact_kind(const std::string& s);

/// A universal attack: an embedding prefix or a discrete token suffix.
struct AttackArtifact {
  ArtifactKind kind = ArtifactKind::kPrefixEmbedding;
  Matrix prefix;    // K' x C, prefix kind only
  TokenSeq suffix;  // suffix kind only
  /// Indices into the malicious held-out pool the artifact was optimised on.
  std::vector<int> train_query_ids;
  int steps = 0;
  /// Loss after each step (step 0 = init), for diagnostics.
  std::vector<double> loss_history;

  /// Throws InputError when the payload does not fit the model.
  void validate(const ModelParams& params) const;
  [[nodiscard]] MixedSequence prompt(const TokenSeq& query) const;
};

nlohmann::json artifact_to_json(const AttackArtifact& a);
AttackArtifact artifact_from_json(const nlohmann::json& j);
void save_artifact(const AttackArtifact& a, const std::filesystem::path& path);
AttackArtifact load_artifact(const std::filesystem::path& path);

struct PrefixAttackOptions {
  int length = 8;
  int steps = 100;
  double epsilon = 1e-3;
  double lambda = 0.1;
};

/// One prefix matrix shared by all training queries, optimised by gradient descent on the
/// query-averaged contrastive attack objective with no suffix. Model is read-only.
AttackArtifact train_universal_prefix(const ModelParams& params, std::span<const QueryTriple> train,
                                      std::span<const int> train_ids, const PrefixAttackOptions& options, Rng& rng);

struct SuffixAttackOptions {
  int length = 8;
  int iterations = 32;
  int top_k = 16;
};

/// Greedy coordinate search over a universal discrete suffix. Each iteration visits one
/// position (round-robin), ranks substitutions by the one-hot gradient of the target loss,
/// scores the top_k exactly and keeps the best, incumbent included.
AttackArtifact greedy_suffix_attack(const ModelParams& params, std::span<const QueryTriple> train,
                                    std::span<const int> train_ids, const SuffixAttackOptions& options, Rng& rng);

/// Sum of -log p(affirm | query + suffix) over `queries`; the quantity the suffix search minimises.
double suffix_target_loss(const ModelParams& params, std::span<const QueryTriple> queries, const TokenSeq& suffix);

enum class VerdictLabel { kHarmful, kRefusal, kOther };
std::string to_string(VerdictLabel label);
VerdictLabel parse_verdict_label(const std::string& s);

struct Verdict {
  VerdictLabel label = VerdictLabel::kOther;
  std::string marker;
};

/// Marker-prefix classifier. A decode is harmful if it starts with an affirmative marker
/// n-gram, a refusal if it starts with a refusal marker n-gram, otherwise other.
class Judge {
 public:
  /// Markers default to the corpus template openers.
  explicit Judge(const Vocab& vocab);
  Judge(const Vocab& vocab, std::vector<std::string> affirmative, std::vector<std::string> refusal);

  [[nodiscard]] Verdict classify(const TokenSeq& decoded) const;

 private:
  std::vector<std::pair<TokenSeq, std::string>> affirmative_;
  std::vector<std::pair<TokenSeq, std::string>> refusal_;
};

Verdict judge(const TokenSeq& decoded, const Vocab& vocab);

struct QueryVerdict {
  std::string query;
  std::string decoded;
  VerdictLabel label = VerdictLabel::kOther;
  std::string marker;
};

struct EvalReport {
  std::string attack;
  double asr = 0.0;
  int n = 0;
  std::vector<QueryVerdict> verdicts;
  double utility_nll = 0.0;
  std::string model_checkpoint;
  std::uint64_t seed = 0;
  /// "original" when the adapter delta is zero, otherwise "defended".
  std::string model_role;

  [[nodiscard]] double other_rate() const;
};

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
/// Structural check of a report document; returns the list of problems (empty when valid).
std::vector<std::string> validate_report_json(const nlohmann::json& j);

/// Greedy-decodes every query under the artifact and judges it. `threads` caps
/// the per-query fan-out; results do not depend on it.
EvalReport compute_asr(const ModelParams& params, const AttackArtifact& artifact, std::span<const QueryTriple> queries,
                       const Vocab& vocab, int threads = 1, int max_decode = 12);

/// Mean per-token NLL of answers given questions over the whole set.
double utility_nll(const ModelParams& params, std::span<const BenignPair> benign);

/// Figure-style trajectory CSV: step,logp_positive,logp_negative at 6 significant digits.
std::string trajectory_report_csv(const AttackTrajectory& trajectory);
void trajectory_report(const AttackTrajectory& trajectory, const std::filesystem::path& path);
/// Writes trajectory_iter_NNNN.csv for each stored iteration; returns the paths written.
std::vector<std::filesystem::path> trajectory_reports(const std::map<int, AttackTrajectory>& trajectories,
                                                      const std::filesystem::path& dir);

/// Held-out malicious pool split: the first `n_attack_train` queries drive universal
/// attacks, the remainder are scored.
inline constexpr int kAttackTrainQueries = 25;
struct HeldoutPools {
  std::vector<QueryTriple> attack_train;
  std::vector<int> attack_train_ids;
  std::vector<QueryTriple> scored;
};
HeldoutPools split_heldout(const CorpusSplit& corpus, int n_attack_train = kAttackTrainQueries);

}  // namespace coeforge
