#include "cotmae/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "json.hpp"

namespace cotmae {

using nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::near: return "near";
    case Strategy::olap: return "olap";
    case Strategy::rand: return "rand";
  }
  return "near";
}

Strategy strategy_from_string(std::string_view s) {
  const auto lower = to_lower_ascii(s);
  if (lower == "near") return Strategy::near;
  if (lower == "olap") return Strategy::olap;
  if (lower == "rand") return Strategy::rand;
  throw std::invalid_argument("unknown sampling strategy '" + std::string(s) + "'");
}

void SamplerConfig::validate() const {
  if (max_span_len < 8) throw std::invalid_argument("sampler.max_span_len must be >= 8");
  double sum = 0;
  for (double w : mixture_weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("sampler mixture weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("sampler mixture weights must sum to 1");
  }
  if (!(olap_fraction > 0.0 && olap_fraction < 1.0)) {
    throw std::invalid_argument("sampler.olap_fraction must lie in (0, 1)");
  }
}

// ---------------------------------------------------------------------------
// sentence splitting

namespace {

constexpr std::array<std::string_view, 10> kAbbreviations = {
    "mr", "mrs", "dr", "prof", "fig", "eq", "etc", "e.g", "i.e", "vs"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// Word immediately before position `dot` (exclusive), stripped of leading
// punctuation such as an opening parenthesis.
std::string word_before(std::string_view text, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !is_space(text[b - 1])) --b;
  std::string_view w = text.substr(b, dot - b);
  while (!w.empty() && !std::isalnum(static_cast<unsigned char>(w.front()))) w.remove_prefix(1);
  return to_lower_ascii(w);
}

bool is_abbreviation(std::string_view text, std::size_t dot) {
  const auto w = word_before(text, dot);
  return std::find(kAbbreviations.begin(), kAbbreviations.end(), w) != kAbbreviations.end();
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto emit = [&](std::string_view piece) {
    auto s = collapse_whitespace(piece);
    if (!s.empty()) out.push_back(std::move(s));
  };

  std::size_t start = 0;
  for (std::size_t i = 0; i + 1 < text.size(); ++i) {
    const char c = text[i];
    if ((c != '.' && c != '!' && c != '?') || !is_space(text[i + 1])) continue;
    std::size_t j = i + 1;
    while (j < text.size() && is_space(text[j])) ++j;
    if (j >= text.size()) break;
    const auto next = static_cast<unsigned char>(text[j]);
    if (!std::isupper(next) && !std::isdigit(next)) continue;
    if (c == '.' && is_abbreviation(text, i)) continue;
    emit(text.substr(start, i + 1 - start));
    start = j;
    i = j - 1;
  }
  emit(text.substr(start));
  return out;
}

// ---------------------------------------------------------------------------
// span packing

namespace {

std::string join_sentences(std::span<const std::string> sentences, std::size_t b,
                           std::size_t e) {
  std::string text;
  for (std::size_t i = b; i < e; ++i) {
    if (i > b) text += ' ';
    text += sentences[i];
  }
  return text;
}

// Greedy span starting at `begin`: longest run whose [CLS]-inclusive length
// fits the budget, at least one sentence.
Span pack_from(std::span<const std::string> sentences, std::span<const std::size_t> lengths,
               std::string_view doc_id, std::size_t begin, std::size_t max_span_len) {
  std::size_t end = begin;
  std::size_t total = 1;
  while (end < sentences.size() && total + lengths[end] <= max_span_len) {
    total += lengths[end];
    ++end;
  }
  if (end == begin) {
    // oversize sentence: truncated at the token level when encoded
    end = begin + 1;
    total = max_span_len;
  }
  return Span{std::string(doc_id), begin, end, join_sentences(sentences, begin, end), total};
}

std::vector<std::size_t> sentence_lengths(std::span<const std::string> sentences) {
  std::vector<std::size_t> lengths;
  lengths.reserve(sentences.size());
  for (const auto& s : sentences) lengths.push_back(count_tokens(s));
  return lengths;
}

}  // namespace

std::vector<Span> build_spans(std::span<const std::string> sentences, std::string_view doc_id,
                              std::size_t max_span_len) {
  if (sentences.empty()) throw std::invalid_argument("empty document");
  if (max_span_len < 2) throw std::invalid_argument("max_span_len must be at least 2");
  const auto lengths = sentence_lengths(sentences);
  std::vector<Span> spans;
  std::size_t pos = 0;
  while (pos < sentences.size()) {
    spans.push_back(pack_from(sentences, lengths, doc_id, pos, max_span_len));
    pos = spans.back().sent_end;
  }
  return spans;
}

DocumentSpans segment_document(const Document& doc, std::size_t max_span_len) {
  DocumentSpans out;
  out.doc_id = doc.id;
  out.max_span_len = max_span_len;
  out.sentences = split_sentences(doc.text);
  if (!out.sentences.empty()) out.spans = build_spans(out.sentences, doc.id, max_span_len);
  return out;
}

// ---------------------------------------------------------------------------
// pair sampling

namespace {

SpanPair ordered_pair(Span x, Span y, Strategy s) {
  if (y.sent_begin < x.sent_begin) std::swap(x, y);
  return SpanPair{std::move(x), std::move(y), s, false};
}

std::optional<Span> overlapping_partner(const DocumentSpans& doc,
                                        std::span<const std::size_t> lengths, const Span& a,
                                        double olap_fraction) {
  const std::size_t len_a = a.sent_end - a.sent_begin;
  const auto rounded = static_cast<std::size_t>(std::llround(olap_fraction * static_cast<double>(len_a)));
  const std::size_t offset = std::clamp<std::size_t>(rounded, 1, len_a - 1);
  for (std::size_t start = a.sent_begin + offset; start < a.sent_end; ++start) {
    auto b = pack_from(doc.sentences, lengths, doc.doc_id, start, doc.max_span_len);
    if (b.sent_end > a.sent_end) return b;
  }
  return std::nullopt;
}

}  // namespace

SpanPair sample_pair(const DocumentSpans& doc, Strategy strategy, Rng& rng,
                     double olap_fraction) {
  const auto& spans = doc.spans;
  const std::size_t n = spans.size();
  switch (strategy) {
    case Strategy::near: {
      if (n < 2) throw InsufficientSpans();
      const auto i = static_cast<std::size_t>(rng.below(n - 1));
      return ordered_pair(spans[i], spans[i + 1], Strategy::near);
    }
    case Strategy::rand: {
      if (n < 2) throw InsufficientSpans();
      const auto i = static_cast<std::size_t>(rng.below(n));
      auto j = static_cast<std::size_t>(rng.below(n - 1));
      if (j >= i) ++j;
      return ordered_pair(spans[i], spans[j], Strategy::rand);
    }
    case Strategy::olap: {
      // a: an existing span with >= 2 sentences that has a following span;
      // b: re-packed from olap_fraction of the way through a
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        if (spans[i].sent_end - spans[i].sent_begin >= 2) candidates.push_back(i);
      }
      if (candidates.empty()) throw InsufficientSpans();
      const auto lengths = sentence_lengths(doc.sentences);
      // Fisher-Yates order; first candidate that admits a valid b wins
      for (std::size_t k = candidates.size(); k > 1; --k) {
        std::swap(candidates[k - 1], candidates[static_cast<std::size_t>(rng.below(k))]);
      }
      for (std::size_t i : candidates) {
        if (auto b = overlapping_partner(doc, lengths, spans[i], olap_fraction)) {
          return SpanPair{spans[i], std::move(*b), Strategy::olap, false};
        }
      }
      throw InsufficientSpans();
    }
  }
  throw InsufficientSpans();
}

SpanPair sample_pair_with_fallback(const DocumentSpans& doc, Strategy strategy, Rng& rng,
                                   double olap_fraction) {
  try {
    return sample_pair(doc, strategy, rng, olap_fraction);
  } catch (const InsufficientSpans&) {
  }
  if (strategy != Strategy::near) {
    try {
      return sample_pair(doc, Strategy::near, rng, olap_fraction);
    } catch (const InsufficientSpans&) {
    }
  }
  if (doc.spans.size() == 1) {
    return SpanPair{doc.spans[0], doc.spans[0], Strategy::near, true};
  }
  throw InsufficientSpans();
}

std::optional<SpanPair> document_pair(const Document& doc, std::size_t doc_index,
                                      const SamplerConfig& cfg, std::uint64_t epoch) {
  const auto seg = segment_document(doc, cfg.max_span_len);
  if (seg.spans.empty()) return std::nullopt;
  Rng rng(derive_seed(cfg.epoch_seed, epoch, doc_index));

  const auto& w = cfg.mixture_weights;
  const double u = rng.uniform() * (w[0] + w[1] + w[2]);
  Strategy strategy = Strategy::rand;
  if (u < w[0]) {
    strategy = Strategy::near;
  } else if (u < w[0] + w[1]) {
    strategy = Strategy::olap;
  }
  // a zero-weight strategy must never be drawn, even at the boundary
  if (strategy == Strategy::rand && w[2] == 0.0) strategy = w[1] > 0.0 ? Strategy::olap : Strategy::near;
  return sample_pair_with_fallback(seg, strategy, rng, cfg.olap_fraction);
}

PairStream::PairStream(std::span<const Document> docs, SamplerConfig cfg, std::uint64_t epoch)
    : docs_(docs), cfg_(cfg), epoch_(epoch) {
  if (docs_.empty()) throw std::invalid_argument("pre-training corpus is empty");
  cfg_.validate();
}

std::optional<SpanPair> PairStream::next() {
  while (pos_ < docs_.size()) {
    const std::size_t i = pos_++;
    if (auto pair = document_pair(docs_[i], i, cfg_, epoch_)) return pair;
    ++skipped_;
  }
  return std::nullopt;
}

PairStream build_pretrain_stream(std::span<const Document> docs, const SamplerConfig& cfg,
                                 std::uint64_t epoch) {
  return PairStream(docs, cfg, epoch);
}

std::vector<SpanPair> build_pretrain_pairs(std::span<const Document> docs,
                                           const SamplerConfig& cfg, std::uint64_t epoch,
                                           unsigned threads, std::size_t* skipped) {
  if (docs.empty()) throw std::invalid_argument("pre-training corpus is empty");
  cfg.validate();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(docs.size())));

  std::vector<std::optional<SpanPair>> slots(docs.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) slots[i] = document_pair(docs[i], i, cfg, epoch);
  };
  if (threads == 1) {
    work(0, docs.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (docs.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = std::min(docs.size(), t * chunk);
      const std::size_t e = std::min(docs.size(), b + chunk);
      pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<SpanPair> pairs;
  pairs.reserve(docs.size());
  std::size_t missing = 0;
  for (auto& s : slots) {
    if (s) {
      pairs.push_back(std::move(*s));
    } else {
      ++missing;
    }
  }
  if (skipped != nullptr) *skipped = missing;
  return pairs;
}

std::string pair_to_json_line(const SpanPair& pair) {
  json j;
  j["doc_id"] = pair.a.doc_id;
  j["strategy"] = std::string(to_string(pair.strategy));
  j["a_text"] = pair.a.text;
  j["b_text"] = pair.b.text;
  j["a_sents"] = {pair.a.sent_begin, pair.a.sent_end};
  j["b_sents"] = {pair.b.sent_begin, pair.b.sent_end};
  if (pair.degenerate) j["degenerate"] = true;
  return j.dump();
}

void write_pairs_jsonl(const std::filesystem::path& path, std::span<const SpanPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += pair_to_json_line(p);
    out += '\n';
  }
  write_file(path, out);
}

// ---------------------------------------------------------------------------
// document io

std::vector<Document> load_documents(const std::filesystem::path& path) {
  std::vector<Document> docs;
  std::unordered_set<std::string> seen;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() ||
        !j["text"].is_string()) {
      throw std::runtime_error(where + ": expected {\"id\": string, \"text\": string}");
    }
    Document d{j["id"].get<std::string>(), j["text"].get<std::string>()};
    if (d.id.empty()) throw std::runtime_error(where + ": empty document id");
    if (trim(d.text).empty()) throw std::runtime_error(where + ": empty document text");
    if (!seen.insert(d.id).second) {
      throw std::runtime_error(where + ": duplicate document id '" + d.id + "'");
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += json{{"id", d.id}, {"text", d.text}}.dump();
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace cotmae
