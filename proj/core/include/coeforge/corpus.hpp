#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coeforge/model.hpp"
#include "coeforge/rng.hpp"
#include "coeforge/vocab.hpp"

namespace coeforge {

/// Malicious query with its paired affirmative and refusal responses.
struct QueryTriple {
  TokenSeq query;
  TokenSeq affirm;
  TokenSeq refuse;
  std::string topic;
  int style = 0;

  friend bool operator==(const QueryTriple&, const QueryTriple&) = default;
};

struct BenignPair {
  TokenSeq question;
  TokenSeq answer;
  /// Stand-in for the paired image; empty in generated corpora.
  TokenSeq context;

  friend bool operator==(const BenignPair&, const BenignPair&) = default;
};

struct CorpusSplit {
  std::vector<QueryTriple> malicious_train;
  std::vector<QueryTriple> malicious_heldout;
  std::vector<BenignPair> benign_train;
  std::vector<BenignPair> benign_heldout;
  Vocab vocab;
  std::uint64_t seed = 0;

  friend bool operator==(const CorpusSplit&, const CorpusSplit&) = default;
};

struct CorpusOptions {
  std::uint64_t seed = 0;
  int n_malicious = 100;
  int n_benign = 500;
  /// Held-out malicious pool: the first kAttackTrainQueries drive universal attacks, the rest are scored.
  int n_malicious_heldout = 125;
  int n_benign_heldout = 100;
  int vocab_size = 256;
};

/// Number of template families per response polarity.
inline constexpr int kStyleFamilies = 4;
inline constexpr int kCorpusFormatVersion = 1;

/// Template-driven synthetic corpus. Styles are assigned round-robin per split.
/// Throws InputError when sizes are below 8, exceed the template space, or the
/// vocabulary would not fit in vocab_size.
CorpusSplit generate_corpus(const CorpusOptions& options);

/// First word of each affirmative / refusal template family.
const std::vector<std::string>& affirmative_markers();
const std::vector<std::string>& refusal_markers();

/// Writes malicious_{train,heldout}.jsonl, benign_{train,heldout}.jsonl and meta.json.
void save_jsonl(const CorpusSplit& split, const std::filesystem::path& dir);
/// Unknown record fields are reported through `warnings` (stderr when null).
CorpusSplit load_jsonl(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr);

/// Uniform without replacement within a call.
std::vector<QueryTriple> sample_malicious_batch(const CorpusSplit& split, std::size_t n, Rng& rng);
std::vector<BenignPair> sample_benign_batch(const CorpusSplit& split, std::size_t h, Rng& rng);

/// Pretraining pairs: malicious train queries to their affirmative, the same requests under a
/// decline opener to their refusal, and benign train questions to answers.
std::vector<SupervisedPair> pretraining_pairs(const CorpusSplit& split);

}  // namespace coeforge
