#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/document.hpp"
#include "cotmae/tokenizer.hpp"

namespace cotmae {

/// A run of consecutive sentences `[sent_begin, sent_end)` of one document.
struct Span {
  std::string doc_id;
  std::size_t sent_begin = 0;
  std::size_t sent_end = 0;
  std::string text;
  /// Token count including the prepended [CLS], capped at the span budget.
  std::size_t token_len = 0;

  bool overlaps(const Span& o) const { return sent_begin < o.sent_end && o.sent_begin < sent_end; }
  bool contains(const Span& o) const {
    return sent_begin <= o.sent_begin && o.sent_end <= sent_end;
  }
  bool operator==(const Span&) const = default;
};

enum class Strategy { near, olap, rand };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct SpanPair {
  Span a;
  Span b;
  Strategy strategy = Strategy::near;
  /// Single-span document: a and b are the same span.
  bool degenerate = false;

  bool operator==(const SpanPair&) const = default;
};

struct SamplerConfig {
  std::size_t max_span_len = 128;
  /// Weights for near, olap, rand.
  std::array<double, 3> mixture_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double olap_fraction = 0.5;
  std::uint64_t epoch_seed = 0;

  void validate() const;
};

/// Thrown when a document cannot support the requested strategy.
class InsufficientSpans : public std::runtime_error {
 public:
  InsufficientSpans() : std::runtime_error("insufficient spans") {}
};

/// Rule-based splitter: breaks after . ! ? when followed by whitespace and an
/// uppercase letter or digit, except after a known abbreviation.
std::vector<std::string> split_sentences(std::string_view text);

/// Greedy packing of consecutive sentences under max_span_len tokens ([CLS]
/// included). A sentence that alone exceeds the budget becomes its own span
/// with token_len == max_span_len.
std::vector<Span> build_spans(std::span<const std::string> sentences, std::string_view doc_id,
                              std::size_t max_span_len);

/// Per-document sampling context. Olap re-packs spans, so it needs the
/// sentences and budget as well as the spans.
struct DocumentSpans {
  std::string doc_id;
  std::vector<std::string> sentences;
  std::vector<Span> spans;
  std::size_t max_span_len = 128;
};

DocumentSpans segment_document(const Document& doc, std::size_t max_span_len);

/// Throws InsufficientSpans when the document cannot support the strategy.
SpanPair sample_pair(const DocumentSpans& doc, Strategy strategy, Rng& rng,
                     double olap_fraction = 0.5);

/// sample_pair with the fallback chain: requested strategy, then Near, then a
/// duplicated span when the document has exactly one span.
SpanPair sample_pair_with_fallback(const DocumentSpans& doc, Strategy strategy, Rng& rng,
                                   double olap_fraction = 0.5);

/// The pair a document contributes for one epoch. Pure function of
/// (document, index, cfg, epoch).
std::optional<SpanPair> document_pair(const Document& doc, std::size_t doc_index,
                                      const SamplerConfig& cfg, std::uint64_t epoch);

/// One pair per document per epoch in corpus order. Documents that yield no
/// spans are skipped and counted.
class PairStream {
 public:
  PairStream(std::span<const Document> docs, SamplerConfig cfg, std::uint64_t epoch);

  std::optional<SpanPair> next();
  std::size_t skipped() const noexcept { return skipped_; }

 private:
  std::span<const Document> docs_;
  SamplerConfig cfg_;
  std::uint64_t epoch_;
  std::size_t pos_ = 0;
  std::size_t skipped_ = 0;
};

PairStream build_pretrain_stream(std::span<const Document> docs, const SamplerConfig& cfg,
                                 std::uint64_t epoch);

/// Materialized stream. With threads > 1 documents are processed in
/// contiguous shards; the output equals the sequential stream.
std::vector<SpanPair> build_pretrain_pairs(std::span<const Document> docs,
                                           const SamplerConfig& cfg, std::uint64_t epoch,
                                           unsigned threads = 1,
                                           std::size_t* skipped = nullptr);

std::string pair_to_json_line(const SpanPair& pair);
void write_pairs_jsonl(const std::filesystem::path& path, std::span<const SpanPair> pairs);

}  // namespace cotmae
