#include "cotmae/bm25.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <thread>

#include "cotmae/tokenizer.hpp"

namespace cotmae {

std::vector<std::string> bm25_terms(std::string_view text) {
  auto pieces = pre_tokenize(text);
  std::erase_if(pieces, [](const std::string& p) {
    return p.size() == 1 && std::ispunct(static_cast<unsigned char>(p[0]));
  });
  return pieces;
}

namespace {

std::vector<std::size_t> rank_ids(const std::vector<std::string>& ids) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return id_less(ids[a], ids[b]); });
  std::vector<std::size_t> rank(ids.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
  return rank;
}

}  // namespace

Bm25Index::Bm25Index(const std::vector<TsvRecord>& passages, double k1, double b,
                     unsigned threads)
    : k1_(k1), b_(b) {
  if (passages.empty()) throw std::invalid_argument("BM25 index over an empty corpus");
  const std::size_t n = passages.size();
  std::vector<std::vector<std::string>> terms(n);
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) terms[i] = bm25_terms(passages[i].text);
  };
  if (workers == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, n * w / workers, n * (w + 1) / workers);
    for (auto& t : pool) t.join();
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ids_.push_back(passages[i].id);
    doc_len_.push_back(terms[i].size());
    total += terms[i].size();
    std::sort(terms[i].begin(), terms[i].end());
    for (std::size_t j = 0; j < terms[i].size();) {
      std::size_t e = j;
      while (e < terms[i].size() && terms[i][e] == terms[i][j]) ++e;
      postings_[terms[i][j]].push_back({i, e - j});
      j = e;
    }
  }
  avgdl_ = static_cast<double>(total) / static_cast<double>(n);
  id_rank_ = rank_ids(ids_);
}

double Bm25Index::idf(const std::string& term) const {
  auto it = postings_.find(term);
  const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
  const double n = static_cast<double>(ids_.size());
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::vector<std::string> Bm25Index::unique_terms(std::string_view query) const {
  auto q = bm25_terms(query);
  std::sort(q.begin(), q.end());
  q.erase(std::unique(q.begin(), q.end()), q.end());
  return q;
}

double Bm25Index::score(std::string_view query, std::size_t doc) const {
  if (doc >= ids_.size()) throw std::out_of_range("BM25 document index out of range");
  double s = 0.0;
  const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(doc_len_[doc]) / avgdl_);
  for (const auto& t : unique_terms(query)) {
    auto it = postings_.find(t);
    if (it == postings_.end()) continue;
    for (const auto& p : it->second) {
      if (p.doc != doc) continue;
      const double tf = static_cast<double>(p.tf);
      s += idf(t) * tf * (k1_ + 1.0) / (tf + norm);
    }
  }
  return s;
}

std::vector<ScoredPassage> Bm25Index::search(std::string_view query, std::size_t k) const {
  std::vector<double> scores(ids_.size(), 0.0);
  std::vector<std::uint8_t> hit(ids_.size(), 0);
  for (const auto& t : unique_terms(query)) {
    auto it = postings_.find(t);
    if (it == postings_.end()) continue;
    const double w = idf(t);
    for (const auto& p : it->second) {
      const double tf = static_cast<double>(p.tf);
      const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(doc_len_[p.doc]) / avgdl_);
      scores[p.doc] += w * tf * (k1_ + 1.0) / (tf + norm);
      hit[p.doc] = 1;
    }
  }
  std::vector<std::size_t> docs;
  for (std::size_t i = 0; i < hit.size(); ++i) {
    if (hit[i]) docs.push_back(i);
  }
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return id_rank_[a] < id_rank_[b];
  };
  const std::size_t take = std::min(k, docs.size());
  std::partial_sort(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(take), docs.end(),
                    better);
  std::vector<ScoredPassage> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back({ids_[docs[i]], scores[docs[i]]});
  return out;
}

}  // namespace cotmae
