#include "doctest.h"

#include <set>

#include "cotmae/corpus.hpp"
#include "test_util.hpp"

using namespace cotmae;
using test::words;

TEST_CASE("split_sentences") {
  using V = std::vector<std::string>;
  CHECK(split_sentences("A cat. A dog! Ok?") == V{"A cat.", "A dog!", "Ok?"});
  CHECK(split_sentences("no terminal punctuation") == V{"no terminal punctuation"});
  CHECK(split_sentences("Dr. Smith arrived. He left.") == V{"Dr. Smith arrived.", "He left."});
  CHECK(split_sentences("It costs 3.5 dollars. Fine.") == V{"It costs 3.5 dollars.", "Fine."});
  CHECK(split_sentences("   ").empty());
}

namespace {

std::vector<std::string> sentences_of(std::initializer_list<std::size_t> lens) {
  std::vector<std::string> out;
  for (auto n : lens) out.push_back(words(n));
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> bounds(const std::vector<Span>& spans) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : spans) out.emplace_back(s.sent_begin, s.sent_end);
  return out;
}

using Bounds = std::vector<std::pair<std::size_t, std::size_t>>;

Document doc_of(const std::string& id, std::size_t n_sent, std::size_t sent_len) {
  std::string text;
  for (std::size_t i = 0; i < n_sent; ++i) {
    text += (i ? " " : "") + std::string("S") + words(sent_len - 2, "w" + std::to_string(i)) + ".";
  }
  return {id, text};
}

}  // namespace

TEST_CASE("build_spans packs greedily under the budget") {
  const auto s1 = sentences_of({50, 60, 70});
  CHECK(bounds(build_spans(s1, "d", 128)) == Bounds{{0, 2}, {2, 3}});

  const auto s2 = sentences_of({300});
  const auto spans2 = build_spans(s2, "d", 128);
  REQUIRE(spans2.size() == 1);
  CHECK(spans2[0].token_len == 128);

  const auto s3 = sentences_of({30, 30, 30, 30, 30});
  const auto spans3 = build_spans(s3, "d", 128);
  CHECK(bounds(spans3) == Bounds{{0, 4}, {4, 5}});
  CHECK(spans3[0].token_len == 121);
}

TEST_CASE("span invariants on random documents") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> sents;
    const auto n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) sents.push_back(words(1 + rng.below(40)));
    const std::size_t budget = 8 + rng.below(64);
    const auto spans = build_spans(sents, "d", budget);
    REQUIRE(!spans.empty());
    CHECK(spans.front().sent_begin == 0);
    CHECK(spans.back().sent_end == n);
    for (std::size_t i = 0; i < spans.size(); ++i) {
      CHECK(spans[i].token_len <= budget);
      CHECK(spans[i].sent_end > spans[i].sent_begin);
      if (i > 0) CHECK(spans[i].sent_begin == spans[i - 1].sent_end);
    }
  }
}

TEST_CASE("near, olap and rand pairs") {
  DocumentSpans d;
  d.doc_id = "d";
  d.sentences = sentences_of({30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30});
  d.max_span_len = 128;
  d.spans = build_spans(d.sentences, "d", 128);
  REQUIRE(d.spans.size() == 4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto near = sample_pair(d, Strategy::near, rng);
    CHECK(near.a.sent_end == near.b.sent_begin);
    const auto rnd = sample_pair(d, Strategy::rand, rng);
    CHECK_FALSE(rnd.a.overlaps(rnd.b));
    CHECK_FALSE(rnd.a == rnd.b);
    const auto ol = sample_pair(d, Strategy::olap, rng);
    CHECK(ol.a.overlaps(ol.b));
    CHECK_FALSE(ol.a.contains(ol.b));
    CHECK_FALSE(ol.b.contains(ol.a));
  }
}

TEST_CASE("olap re-packs from the midpoint of a") {
  DocumentSpans d;
  d.doc_id = "d";
  d.sentences = sentences_of({30, 30, 30, 30, 30, 30});
  d.max_span_len = 128;
  d.spans = build_spans(d.sentences, "d", 128);
  REQUIRE(bounds(d.spans) == Bounds{{0, 4}, {4, 6}});
  Rng rng(1);
  const auto p = sample_pair(d, Strategy::olap, rng, 0.5);
  CHECK(p.a.sent_begin == 0);
  CHECK(p.a.sent_end == 4);
  CHECK(p.b.sent_begin == 2);
  CHECK(p.b.sent_end == 6);
}

TEST_CASE("fallback chain") {
  DocumentSpans one;
  one.doc_id = "d";
  one.sentences = sentences_of({10});
  one.spans = build_spans(one.sentences, "d", 128);
  Rng rng(3);
  CHECK_THROWS_AS(sample_pair(one, Strategy::near, rng), InsufficientSpans);
  const auto p = sample_pair_with_fallback(one, Strategy::olap, rng);
  CHECK(p.degenerate);
  CHECK(p.a == p.b);

  DocumentSpans two;
  two.doc_id = "d";
  two.sentences = sentences_of({100, 100});
  two.max_span_len = 128;
  two.spans = build_spans(two.sentences, "d", 128);
  const auto q = sample_pair_with_fallback(two, Strategy::olap, rng);
  CHECK(q.strategy == Strategy::near);
  CHECK_FALSE(q.degenerate);
}

TEST_CASE("pair streams are deterministic, epoch-dependent and thread-independent") {
  std::vector<Document> docs;
  for (int i = 0; i < 60; ++i) docs.push_back(doc_of("doc" + std::to_string(i), 3 + i % 7, 12));
  docs.push_back({"empty", "  "});
  SamplerConfig cfg;
  cfg.max_span_len = 30;
  cfg.epoch_seed = 11;
  std::size_t skipped = 0;
  const auto a = build_pretrain_pairs(docs, cfg, 0, 1, &skipped);
  const auto b = build_pretrain_pairs(docs, cfg, 0, 4);
  CHECK(a == b);
  CHECK(skipped == 1);
  CHECK(a.size() == docs.size() - 1);

  std::string lines_a, lines_b;
  for (const auto& p : a) lines_a += pair_to_json_line(p);
  for (const auto& p : build_pretrain_pairs(docs, cfg, 0)) lines_b += pair_to_json_line(p);
  CHECK(lines_a == lines_b);

  CHECK(build_pretrain_pairs(docs, cfg, 1) != a);

  auto stream = build_pretrain_stream(docs, cfg, 0);
  std::vector<SpanPair> streamed;
  while (auto p = stream.next()) streamed.push_back(*p);
  CHECK(streamed == a);
}

TEST_CASE("uniform mixture draws each strategy within the 99.9% binomial interval") {
  // 10k documents of four two-sentence spans: every strategy is always feasible
  std::vector<Document> docs;
  for (int i = 0; i < 10000; ++i) docs.push_back(doc_of(std::to_string(i), 8, 10));
  SamplerConfig cfg;
  cfg.max_span_len = 24;
  const auto pairs = build_pretrain_pairs(docs, cfg, 0);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& p : pairs) ++counts[static_cast<int>(p.strategy)];
  for (auto c : counts) {
    CHECK(c >= 3179);
    CHECK(c <= 3489);
  }
}

TEST_CASE("zero-weight strategies are never drawn") {
  std::vector<Document> docs;
  for (int i = 0; i < 500; ++i) docs.push_back(doc_of(std::to_string(i), 6, 10));
  SamplerConfig cfg;
  cfg.max_span_len = 24;
  cfg.mixture_weights = {0.0, 0.0, 1.0};
  for (const auto& p : build_pretrain_pairs(docs, cfg, 0)) CHECK(p.strategy == Strategy::rand);
  cfg.mixture_weights = {1.0, 0.0, 0.0};
  for (const auto& p : build_pretrain_pairs(docs, cfg, 0)) CHECK(p.strategy == Strategy::near);
}

TEST_CASE("sampler config validation") {
  SamplerConfig cfg;
  cfg.mixture_weights = {0.0, 0.0, 0.0};
  CHECK_THROWS(cfg.validate());
  cfg.mixture_weights = {-1.0, 1.0, 1.0};
  CHECK_THROWS(cfg.validate());
  cfg = SamplerConfig{};
  cfg.max_span_len = 1;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("document loading rejects bad input") {
  test::TempDir dir("docs");
  write_file(dir / "ok.jsonl", "{\"id\":\"a\",\"text\":\"One. Two.\"}\n\n{\"id\":\"b\",\"text\":\"Three.\"}\n");
  CHECK(load_documents(dir / "ok.jsonl").size() == 2);
  write_file(dir / "dup.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
  CHECK_THROWS(load_documents(dir / "dup.jsonl"));
  write_file(dir / "blank.jsonl", "{\"id\":\"a\",\"text\":\"   \"}\n");
  CHECK_THROWS(load_documents(dir / "blank.jsonl"));
  write_file(dir / "bad.jsonl", "{\"id\":\"a\"\n");
  CHECK_THROWS(load_documents(dir / "bad.jsonl"));
}
