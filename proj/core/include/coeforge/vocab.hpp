#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "coeforge/tensor.hpp"

namespace coeforge {

/// Closed word-level vocabulary. Ids 0, 1, 2 are always <bos>, <eos>, <sep>.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kSep = 2;
  static constexpr std::size_t kMaxSize = 512;

  Vocab();
  /// `tokens` must start with the three reserved markers and contain no duplicates.
  explicit Vocab(std::vector<std::string> tokens);

  /// Appends `word` if unseen and returns its id.
  TokenId intern(std::string_view word);

  [[nodiscard]] TokenId id(std::string_view word) const;
  [[nodiscard]] bool contains(std::string_view word) const;
  [[nodiscard]] const std::string& token(TokenId id) const;
  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  /// Splits on single spaces; every word must already be in the vocabulary.
  [[nodiscard]] TokenSeq encode(std::string_view text) const;
  [[nodiscard]] std::string decode(const TokenSeq& ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Throws InputError unless every id is in [0, vocab_size).
void validate_ids(const TokenSeq& ids, std::size_t vocab_size);

}  // namespace coeforge
