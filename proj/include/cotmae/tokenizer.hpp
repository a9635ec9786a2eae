#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cotmae/document.hpp"

namespace cotmae {

using TokenId = std::int32_t;
/// Token ids of one text, `[CLS]` first. Never padded.
using TokenSequence = std::vector<TokenId>;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

/// Lowercased word-level pieces: runs of letters/digits (any byte >= 0x80
/// counts as a letter) and single punctuation characters.
std::vector<std::string> pre_tokenize(std::string_view text);

/// Immutable word-level vocabulary. Ids 0-4 are the specials in fixed order.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(TokenId id) const;
  /// Id of a lowercased word, or [UNK].
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Specials plus the (target_size - 5) most frequent pieces; ties broken
/// lexicographically.
Vocabulary train_vocab(std::span<const Document> corpus, std::size_t target_size);

/// `[CLS]` followed by word ids, truncated to max_len.
TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

/// Number of word pieces in text, excluding `[CLS]`.
std::size_t count_tokens(std::string_view text);

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace cotmae
