#include "cotmae/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "cotmae/common.hpp"

namespace cotmae {

namespace {

const std::vector<std::string> kSpecialNames = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
         c >= 0x80;
}

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

template <typename Fn>
void for_each_piece(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
      fn(text.substr(i, j - i));
      i = j;
    } else {
      fn(text.substr(i, 1));
      ++i;
    }
  }
}

}  // namespace

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> pieces;
  for_each_piece(text, [&](std::string_view p) { pieces.push_back(to_lower_ascii(p)); });
  return pieces;
}

std::size_t count_tokens(std::string_view text) {
  std::size_t n = 0;
  for_each_piece(text, [&](std::string_view) { ++n; });
  return n;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>(kSpecialNames)) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kSpecialNames.size() ||
      !std::equal(kSpecialNames.begin(), kSpecialNames.end(), tokens_.begin())) {
    throw std::invalid_argument("vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end() || it->second < special::kCount) return special::kUnk;
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  write_file(path, out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return Vocabulary(std::move(lines));
}

Vocabulary train_vocab(std::span<const Document> corpus, std::size_t target_size) {
  if (target_size < special::kCount) {
    throw std::invalid_argument("vocabulary target size must be at least 5");
  }
  if (corpus.empty()) throw std::invalid_argument("cannot train a vocabulary on an empty corpus");

  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus) {
    for_each_piece(doc.text, [&](std::string_view p) { ++counts[to_lower_ascii(p)]; });
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // map iteration is already lexicographic, so a stable sort on count breaks ties
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(kSpecialNames);
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= target_size) break;
    tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("encode: max_len must be at least 2");
  TokenSequence ids;
  ids.push_back(special::kCls);
  for_each_piece(text, [&](std::string_view p) {
    if (ids.size() < max_len) ids.push_back(vocab.id(to_lower_ascii(p)));
  });
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace cotmae
