#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "apd/common.hpp"

namespace apd {

enum class TokenMode { Character, Whitespace };

inline std::string to_string(TokenMode m) { return m == TokenMode::Character ? "char" : "whitespace"; }

inline TokenMode token_mode_from_string(std::string_view s) {
  if (s == "char" || s == "character") return TokenMode::Character;
  if (s == "whitespace" || s == "word") return TokenMode::Whitespace;
  throw InvalidArgument("unknown token mode '" + std::string(s) + "'");
}

// Splits text into UTF-8 code points (character mode) or non-empty
// whitespace-separated fields.
inline std::vector<std::string> split_tokens(std::string_view text, TokenMode mode) {
  std::vector<std::string> out;
  if (mode == TokenMode::Character) {
    for (std::size_t i = 0; i < text.size();) {
      const auto c = static_cast<unsigned char>(text[i]);
      std::size_t len = 1;
      if (c >= 0xf0) len = 4;
      else if (c >= 0xe0) len = 3;
      else if (c >= 0xc0) len = 2;
      len = std::min(len, text.size() - i);
      out.emplace_back(text.substr(i, len));
      i += len;
    }
  } else {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

/// Dense token table. Ids 0 and 1 are reserved for the unknown token and
/// the left-padding token; corpus tokens follow in sorted order.
class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kPad = 1;
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kPadToken = "<pad>";

  Vocabulary() : Vocabulary(TokenMode::Character, {}) {}

  Vocabulary(TokenMode mode, const std::vector<std::string>& corpus_tokens) : mode_(mode) {
    add(std::string(kUnkToken));
    add(std::string(kPadToken));
    for (const auto& t : corpus_tokens) add(t);
  }

  /// Builds a vocabulary from every distinct token in the given lines.
  static Vocabulary build(const std::vector<std::string>& lines, TokenMode mode) {
    std::map<std::string, int> seen;
    for (const auto& line : lines)
      for (auto& t : split_tokens(line, mode)) seen.emplace(std::move(t), 0);
    std::vector<std::string> tokens;
    for (auto& [t, _] : seen)
      if (t != kUnkToken && t != kPadToken) tokens.push_back(t);
    return Vocabulary(mode, tokens);
  }

  std::size_t size() const { return tokens_.size(); }
  TokenMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  const std::string& token(TokenId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenId lookup(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view tok) const { return index_.count(std::string(tok)) != 0; }

  TokenSeq tokenize(std::string_view text) const {
    TokenSeq ids;
    for (const auto& t : split_tokens(text, mode_)) ids.push_back(lookup(t));
    return ids;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (mode_ == TokenMode::Whitespace && i > 0) out.push_back(' ');
      out += token(ids[i]);
    }
    return out;
  }

  std::string hash() const {
    Fnv1a h;
    h.update(to_string(mode_));
    for (const auto& t : tokens_) {
      h.update(t);
      h.update("\x1f", 1);
    }
    return h.hex();
  }

 private:
  void add(const std::string& t) {
    if (index_.count(t)) return;
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  TokenMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline TokenSeq tokenize(std::string_view text, const Vocabulary& vocab) { return vocab.tokenize(text); }

}  // namespace apd
