#include "cotmae/evalindex.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "cotmae/common.hpp"

namespace cotmae {

Qrels read_qrels(const std::filesystem::path& path) {
  Qrels q;
  std::size_t line_no = 0;
  for (const auto& raw : read_lines(path)) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::istringstream in(line);
    for (std::string c; in >> c;) cols.push_back(c);
    if (cols.size() == 2) {
      q[cols[0]].insert(cols[1]);
    } else if (cols.size() == 4) {
      if (std::stod(cols[3]) > 0) q[cols[0]].insert(cols[2]);
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected 'qid<TAB>pid' or 'qid 0 pid rel'");
    }
  }
  return q;
}

std::string first_relevant(const std::set<std::string>& rel) {
  if (rel.empty()) throw std::invalid_argument("query has no relevant passage");
  return *std::min_element(rel.begin(), rel.end(), [](const auto& a, const auto& b) {
    return id_less(a, b);
  });
}

// ---------------------------------------------------------------------------

PassageIndex::PassageIndex(std::vector<std::string> ids, nn::Tensor<float> matrix)
    : ids_(std::move(ids)), matrix_(std::move(matrix)) {
  if (ids_.empty()) throw std::invalid_argument("passage index needs at least one passage");
  if (matrix_.rank() != 2 || matrix_.dim(0) != ids_.size()) {
    throw std::invalid_argument("passage index: matrix rows do not match id count");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : ids_) {
    if (!seen.insert(id).second) throw std::invalid_argument("duplicate passage id '" + id + "'");
  }
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return id_less(ids_[a], ids_[b]); });
  id_rank_.resize(ids_.size());
  for (std::size_t r = 0; r < order.size(); ++r) id_rank_[order[r]] = r;
}

double similarity(std::span<const float> q, std::span<const float> p) {
  if (q.size() != p.size()) {
    throw std::invalid_argument("similarity: dimension mismatch " + std::to_string(q.size()) +
                                " vs " + std::to_string(p.size()));
  }
  float s = 0.0f;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * p[i];
  return s;
}

std::vector<ScoredPassage> PassageIndex::search(std::span<const float> query,
                                                std::size_t k) const {
  if (k == 0) throw std::invalid_argument("search: k must be >= 1");
  if (query.size() != dim()) {
    throw std::invalid_argument("search: query dimension " + std::to_string(query.size()) +
                                " vs index dimension " + std::to_string(dim()));
  }
  struct Entry {
    float score;
    std::size_t row;
  };
  // "a ranks before b"; the heap top is the worst kept entry.
  auto better = [&](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    return id_rank_[a.row] < id_rank_[b.row];
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(better)> heap(better);
  const std::size_t d = dim();
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    const float* row = matrix_.row(r);
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i) s += query[i] * row[i];
    Entry e{s, r};
    if (heap.size() < k) {
      heap.push(e);
    } else if (better(e, heap.top())) {
      heap.pop();
      heap.push(e);
    }
  }
  std::vector<ScoredPassage> out(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    out[i] = {ids_[heap.top().row], heap.top().score};
    heap.pop();
  }
  return out;
}

std::vector<std::vector<ScoredPassage>> PassageIndex::search_many(const nn::Tensor<float>& queries,
                                                                  std::size_t k,
                                                                  unsigned threads) const {
  const std::size_t n = queries.rank() == 2 ? queries.dim(0) : 0;
  std::vector<std::vector<ScoredPassage>> out(n);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      out[i] = search(std::span<const float>(queries.row(i), queries.cols()), k);
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (workers <= 1) {
    work(0, n);
    return out;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, n * w / workers, n * (w + 1) / workers);
  for (auto& t : pool) t.join();
  return out;
}

namespace {

constexpr char kIndexMagic[] = "CTIDX1";

}  // namespace

void PassageIndex::save(const std::filesystem::path& path,
                        const std::string& encoder_checkpoint) const {
  nlohmann::ordered_json meta;
  meta["encoder"] = encoder_checkpoint;
  meta["dim"] = dim();
  meta["ids"] = ids_;
  const std::string header = meta.dump();
  std::string out(kIndexMagic, 6);
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += header;
  for (float v : matrix_.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  write_file(path, out);
}

PassageIndex PassageIndex::load(const std::filesystem::path& path, std::string* encoder_checkpoint) {
  const std::string data = read_file(path);
  if (data.size() < 14 || data.compare(0, 6, kIndexMagic) != 0) {
    throw std::runtime_error("bad magic in index " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(p[6 + i]) << (8 * i);
  if (data.size() < 14 + len) throw std::runtime_error("index " + path.string() + " is truncated");
  const auto meta = nlohmann::json::parse(data.begin() + 14, data.begin() + 14 + static_cast<std::ptrdiff_t>(len));
  auto ids = meta.at("ids").get<std::vector<std::string>>();
  const auto d = meta.at("dim").get<std::size_t>();
  if (data.size() != 14 + len + ids.size() * d * 4) {
    throw std::runtime_error("index " + path.string() + " has the wrong payload size");
  }
  nn::Tensor<float> m({ids.size(), d});
  const unsigned char* q = p + 14 + len;
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(q[i * 4 + b]) << (8 * b);
    std::memcpy(&m[i], &bits, 4);
  }
  if (encoder_checkpoint) *encoder_checkpoint = meta.at("encoder").get<std::string>();
  return PassageIndex(std::move(ids), std::move(m));
}

// ---------------------------------------------------------------------------
// metrics

namespace {

const std::set<std::string>& relevant_for(const Qrels& qrels, const std::string& qid) {
  auto it = qrels.find(qid);
  if (it == qrels.end()) throw std::invalid_argument("query '" + qid + "' missing from qrels");
  return it->second;
}

void check_k(std::size_t k) {
  if (k == 0) throw std::invalid_argument("metric cutoff k must be >= 1");
}

double mean_over(const RetrievalRun& run, const Qrels& qrels,
                 const std::function<double(const QueryResult&, const std::set<std::string>&)>& f) {
  if (run.empty()) return 0.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& q : run) {
    const auto& rel = relevant_for(qrels, q.query_id);
    if (rel.empty()) continue;
    sum += f(q, rel);
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace

double mrr_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k) {
  check_k(k);
  return mean_over(run, qrels, [k](const QueryResult& q, const std::set<std::string>& rel) {
    for (std::size_t i = 0; i < std::min(k, q.hits.size()); ++i) {
      if (rel.count(q.hits[i].id)) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
  });
}

double recall_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k) {
  check_k(k);
  return mean_over(run, qrels, [k](const QueryResult& q, const std::set<std::string>& rel) {
    std::size_t found = 0;
    for (std::size_t i = 0; i < std::min(k, q.hits.size()); ++i) found += rel.count(q.hits[i].id);
    return static_cast<double>(found) / static_cast<double>(rel.size());
  });
}

double ndcg_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k) {
  check_k(k);
  return mean_over(run, qrels, [k](const QueryResult& q, const std::set<std::string>& rel) {
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, q.hits.size()); ++i) {
      if (rel.count(q.hits[i].id)) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
    }
    double ideal = 0.0;
    for (std::size_t i = 0; i < std::min(k, rel.size()); ++i) {
      ideal += 1.0 / std::log2(static_cast<double>(i + 2));
    }
    return dcg / ideal;
  });
}

std::pair<std::string, std::size_t> parse_metric(const std::string& name) {
  const auto at = name.find('@');
  const std::string kind = to_lower_ascii(name.substr(0, at));
  if (at == std::string::npos || (kind != "mrr" && kind != "recall" && kind != "ndcg")) {
    throw std::invalid_argument("unknown metric '" + name +
                                "' (expected mrr@K, recall@K or ndcg@K)");
  }
  std::size_t k = 0;
  try {
    std::size_t used = 0;
    k = std::stoul(name.substr(at + 1), &used);
    if (used != name.size() - at - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad cutoff in metric '" + name + "'");
  }
  if (k == 0) throw std::invalid_argument("metric '" + name + "' needs k >= 1");
  return {kind, k};
}

std::vector<std::pair<std::string, double>> evaluate_run(const RetrievalRun& run,
                                                         const Qrels& qrels,
                                                         const std::vector<std::string>& metrics) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& m : metrics) {
    const auto [kind, k] = parse_metric(m);
    double v = 0.0;
    if (kind == "mrr") v = mrr_at_k(run, qrels, k);
    if (kind == "recall") v = recall_at_k(run, qrels, k);
    if (kind == "ndcg") v = ndcg_at_k(run, qrels, k);
    out.emplace_back(m, v);
  }
  return out;
}

void write_run(const std::filesystem::path& path, const RetrievalRun& run, const std::string& tag) {
  std::string out;
  for (const auto& q : run) {
    for (std::size_t i = 0; i < q.hits.size(); ++i) {
      out += q.query_id + " Q0 " + q.hits[i].id + " " + std::to_string(i + 1) + " " +
             format_double(q.hits[i].score, 9) + " " + tag + "\n";
    }
  }
  write_file(path, out);
}

RetrievalRun read_run(const std::filesystem::path& path) {
  RetrievalRun run;
  std::unordered_map<std::string, std::size_t> slot;
  std::size_t line_no = 0;
  for (const auto& raw : read_lines(path)) {
    ++line_no;
    if (trim(raw).empty()) continue;
    std::istringstream in(raw);
    std::string qid, q0, pid, tag;
    std::size_t rank = 0;
    double score = 0.0;
    if (!(in >> qid >> q0 >> pid >> rank >> score >> tag)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected 'qid Q0 pid rank score tag'");
    }
    auto [it, inserted] = slot.emplace(qid, run.size());
    if (inserted) run.push_back({qid, {}});
    run[it->second].hits.push_back({pid, score});
  }
  for (auto& q : run) {
    std::stable_sort(q.hits.begin(), q.hits.end(), [](const auto& a, const auto& b) {
      if (a.score != b.score) return a.score > b.score;
      return id_less(a.id, b.id);
    });
  }
  return run;
}

}  // namespace cotmae
