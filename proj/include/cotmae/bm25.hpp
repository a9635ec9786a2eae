#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/evalindex.hpp"

namespace cotmae {

/// Lowercased alphanumeric terms; punctuation pieces are dropped.
std::vector<std::string> bm25_terms(std::string_view text);

/// Okapi BM25 over an in-memory inverted index, with the Lucene idf
/// log(1 + (N - df + 0.5) / (df + 0.5)). Repeated query terms count once.
class Bm25Index {
 public:
  Bm25Index(const std::vector<TsvRecord>& passages, double k1 = 0.9, double b = 0.4,
            unsigned threads = 1);

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  double avg_doc_len() const noexcept { return avgdl_; }

  double idf(const std::string& term) const;
  double score(std::string_view query, std::size_t doc) const;
  /// Passages with a positive score, best first, ties by id_less. An empty
  /// query yields no hits.
  std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const;

 private:
  struct Posting {
    std::size_t doc;
    std::size_t tf;
  };
  std::vector<std::string> unique_terms(std::string_view query) const;

  double k1_, b_;
  std::vector<std::string> ids_;
  std::vector<std::size_t> doc_len_;
  std::vector<std::size_t> id_rank_;
  double avgdl_ = 0.0;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
};

}  // namespace cotmae
