#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cotmae/nn/tensor.hpp"

namespace cotmae {

/// Query id -> relevant passage ids.
using Qrels = std::map<std::string, std::set<std::string>>;

/// Reads `qid<TAB>pid` lines; four-column TREC qrels (`qid 0 pid rel`) are
/// accepted too, keeping rel > 0.
Qrels read_qrels(const std::filesystem::path& path);

/// Lowest relevant id under id_less.
std::string first_relevant(const std::set<std::string>& rel);

struct ScoredPassage {
  std::string id;
  double score = 0.0;
  bool operator==(const ScoredPassage&) const = default;
};

struct QueryResult {
  std::string query_id;
  std::vector<ScoredPassage> hits;
};

/// Ranked hits per query, in query input order.
using RetrievalRun = std::vector<QueryResult>;

/// Dense passage vectors with their ids, one row per passage.
class PassageIndex {
 public:
  PassageIndex() = default;
  PassageIndex(std::vector<std::string> ids, nn::Tensor<float> matrix);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return matrix_.empty() ? 0 : matrix_.cols(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const nn::Tensor<float>& matrix() const noexcept { return matrix_; }

  /// Exact top-k by inner product using a bounded heap. Ties go to the lower
  /// id under id_less. k larger than the corpus returns everything.
  std::vector<ScoredPassage> search(std::span<const float> query, std::size_t k) const;

  /// One search per row of `queries`, rows split across `threads` workers.
  std::vector<std::vector<ScoredPassage>> search_many(const nn::Tensor<float>& queries,
                                                       std::size_t k,
                                                       unsigned threads = 1) const;

  /// Binary file: "CTIDX1" | u64 len | JSON {ids, dim, encoder} | f32 rows.
  void save(const std::filesystem::path& path, const std::string& encoder_checkpoint) const;
  static PassageIndex load(const std::filesystem::path& path,
                           std::string* encoder_checkpoint = nullptr);

 private:
  std::vector<std::string> ids_;
  nn::Tensor<float> matrix_;
  /// Position of each row in id_less order, for integer tie-breaks.
  std::vector<std::size_t> id_rank_;
};

double similarity(std::span<const float> q, std::span<const float> p);

/// Mean reciprocal rank of the first relevant hit within the top k.
double mrr_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k);
/// Mean fraction of relevant passages found in the top k.
double recall_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k);
/// Binary-gain nDCG with a 1/log2(rank+1) discount.
double ndcg_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k);

/// Parses names such as "mrr@10", "recall@1000", "ndcg@10".
std::pair<std::string, std::size_t> parse_metric(const std::string& name);
std::vector<std::pair<std::string, double>> evaluate_run(const RetrievalRun& run,
                                                         const Qrels& qrels,
                                                         const std::vector<std::string>& metrics);

/// TREC run format: `qid Q0 pid rank score tag`.
void write_run(const std::filesystem::path& path, const RetrievalRun& run,
               const std::string& tag = "cotmae");
RetrievalRun read_run(const std::filesystem::path& path);

}  // namespace cotmae
