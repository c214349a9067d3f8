#include "coeforge/vocab.hpp"

#include <algorithm>

#include "coeforge/errors.hpp"

namespace coeforge {

namespace {
const std::vector<std::string> kReserved = {"<bos>", "<eos>", "<sep>"};
}

Vocab::Vocab() {
  for (const auto& r : kReserved) intern(r);
}

Vocab::Vocab(std::vector<std::string> tokens) {
  if (tokens.size() < kReserved.size() ||
      !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw InputError("vocab must begin with <bos>, <eos>, <sep>");
  }
  for (const auto& t : tokens) {
    if (contains(t)) throw InputError("duplicate vocab token: " + t);
    intern(t);
  }
}

TokenId Vocab::intern(std::string_view word) {
  if (word.empty() || word.find(' ') != std::string_view::npos) {
    throw InputError("vocab tokens must be non-empty and contain no spaces");
  }
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  if (tokens_.size() >= kMaxSize) throw InputError("vocab overflow: more than 512 tokens");
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(word);
  index_.emplace(tokens_.back(), id);
  return id;
}

TokenId Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw InputError("unknown token: " + std::string(word));
  return it->second;
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    if (end > pos) out.push_back(id(text.substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

std::string Vocab::decode(const TokenSeq& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += token(ids[i]);
  }
  return out;
}

void validate_ids(const TokenSeq& ids, std::size_t vocab_size) {
  for (TokenId t : ids) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw InputError("token id " + std::to_string(t) + " out of range for vocab of size " +
                       std::to_string(vocab_size));
    }
  }
}

}  // namespace coeforge
