#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/document.hpp"
#include "cotmae/evalindex.hpp"

namespace cotmae {

/// Distinct pronounceable word for every index (three consonant-vowel
/// syllables, so 343000 words before repeating).
std::string pseudo_word(std::size_t index);

/// Small corpus for memorization runs: each document has two sentences of
/// `sentence_words` words drawn from `n_words` distinct words (all of which
/// are used at least once), each ending with a period.
std::vector<Document> make_overfit_corpus(std::size_t n_docs, std::size_t n_words,
                                          std::size_t sentence_words, std::uint64_t seed);

struct RetrievalTaskOptions {
  std::size_t n_passages = 100;
  std::size_t filler_sentences = 3;
  std::size_t filler_vocab = 60;
  std::size_t sentence_words = 8;
  /// Words of the distinctive sentence that occur in no other passage.
  std::size_t unique_words = 4;
  std::uint64_t seed = 7;
};

/// Passages of filler sentences plus one distinctive sentence; the query for
/// passage i is its distinctive sentence and its only relevant passage is i.
struct RetrievalTask {
  std::vector<Document> docs;
  std::vector<TsvRecord> passages;
  std::vector<TsvRecord> queries;
  Qrels qrels;
};

RetrievalTask make_retrieval_task(const RetrievalTaskOptions& opts);

/// Writes corpus.jsonl, passages.tsv, queries.tsv and qrels.tsv under dir.
void write_retrieval_task(const std::filesystem::path& dir, const RetrievalTask& task);

}  // namespace cotmae
