#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cotmae/bm25.hpp"
#include "cotmae/evalindex.hpp"
#include "cotmae/model.hpp"
#include "cotmae/pretrain.hpp"

namespace cotmae {

struct FinetuneConfig {
  OptimConfig optim{.peak_lr = 5e-5, .total_steps = 500, .batch_size = 8};
  /// Negatives drawn per example per step from its mined pool.
  std::size_t group_negatives = 7;
  bool in_batch = true;
  bool tied = true;
  std::size_t bm25_depth = 200;
  std::size_t dense_depth = 200;
  /// Mined negatives kept per query and retriever.
  std::size_t per_query = 7;
  /// Stage-2 starting weights: "pretrained" or "stage1".
  std::string stage2_init = "pretrained";
  double bm25_k1 = 0.9;
  double bm25_b = 0.4;
  std::size_t query_max_len = 32;
  std::size_t passage_max_len = 128;
  std::uint64_t seed = 42;

  void validate() const;
};

/// Query and passage encoders. When tied, `passage` is unused and both roles
/// share `query`.
template <typename T>
struct DualEncoder {
  bool tied = true;
  EncoderWeights<T> query;
  EncoderWeights<T> passage;

  EncoderWeights<T>& q() { return query; }
  EncoderWeights<T>& p() { return tied ? query : passage; }
  std::vector<nn::Parameter<T>*> parameters();
};

/// Both encoders start from the same pre-trained encoder weights.
template <typename T>
DualEncoder<T> make_dual_encoder(const EncoderWeights<T>& pretrained, bool tied);

/// Copies encoder tensors from a pre-training or dual-encoder checkpoint.
/// For a dual-encoder file, `role` picks "query" or "passage".
template <typename T>
EncoderWeights<T> load_encoder(const RawCheckpoint& ck, const std::string& role = "query");

template <typename T>
void save_dual_encoder(const std::filesystem::path& path, DualEncoder<T>& enc,
                       const Vocabulary& vocab, const json& extra = json::object());

template <typename T>
DualEncoder<T> load_dual_encoder(const RawCheckpoint& ck);

/// Vocabulary and model config stored in any checkpoint.
Vocabulary checkpoint_vocab(const RawCheckpoint& ck);
ModelConfig checkpoint_model_config(const RawCheckpoint& ck);

/// Final-layer [CLS] rows for each text, unmasked and without dropout.
/// Results do not depend on batch composition.
template <typename T>
nn::Tensor<float> embed_texts(EncoderWeights<T>& enc, const Vocabulary& vocab,
                              std::span<const std::string> texts, std::size_t max_len,
                              unsigned threads = 1, std::size_t batch = 32);

struct TrainingExample {
  std::string query_id;
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
};

using NegativeMap = std::map<std::string, std::vector<std::string>>;

/// Top-`depth` hits minus relevant passages, cut to per_query. Queries left
/// with fewer than per_query negatives are reported through `short_queries`.
NegativeMap filter_negatives(const RetrievalRun& run, const Qrels& qrels, std::size_t per_query,
                             std::vector<std::string>* short_queries = nullptr);

NegativeMap mine_bm25(const Bm25Index& index, const std::vector<TsvRecord>& queries,
                      const Qrels& qrels, std::size_t depth, std::size_t per_query,
                      std::vector<std::string>* short_queries = nullptr);

template <typename T>
NegativeMap mine_dense(DualEncoder<T>& enc, const Vocabulary& vocab,
                       const std::vector<TsvRecord>& passages,
                       const std::vector<TsvRecord>& queries, const Qrels& qrels,
                       std::size_t depth, std::size_t per_query, const FinetuneConfig& cfg,
                       unsigned threads = 1, std::vector<std::string>* short_queries = nullptr);

/// Union of negative lists per query, first-seen order, duplicates dropped.
NegativeMap merge_negatives(const NegativeMap& a, const NegativeMap& b);

/// One example per query with qrels; the positive is the lowest relevant id.
std::vector<TrainingExample> build_examples(const std::vector<TsvRecord>& queries,
                                            const Qrels& qrels, const NegativeMap& negatives);

void write_examples_jsonl(const std::filesystem::path& path,
                          const std::vector<TrainingExample>& examples);
std::vector<TrainingExample> read_examples_jsonl(const std::filesystem::path& path,
                                                 const std::vector<TsvRecord>& queries);

/// The candidate layout of one contrastive batch. Every row lists the
/// positive first, then its own negatives, then (with in-batch sharing) the
/// other examples' passages that are not relevant to it. Passage ids are
/// unique across the batch and within every row.
struct ContrastiveBatch {
  std::vector<std::string> queries;
  std::vector<std::string> passage_ids;
  std::vector<std::vector<std::size_t>> candidates;
};

ContrastiveBatch layout_batch(std::span<const TrainingExample> examples, const Qrels& qrels,
                              bool in_batch);

/// Mean over queries of -log softmax over candidate dot products, first
/// candidate being the positive. No temperature.
template <typename T>
nn::Var<T> contrastive_loss(nn::Tape<T>& tape, DualEncoder<T>& enc, const Vocabulary& vocab,
                            const ContrastiveBatch& batch,
                            const std::unordered_map<std::string, std::string>& passage_text,
                            const FinetuneConfig& cfg, Rng* dropout_rng);

struct FinetuneResult {
  std::filesystem::path checkpoint;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// Contrastive training of `enc` in place. Each step draws group_negatives
/// per example from its pool. Writes out_dir/metrics.csv (step,loss,lr) and
/// out_dir/checkpoints/final.ckpt.
template <typename T>
FinetuneResult finetune_loop(DualEncoder<T>& enc, const Vocabulary& vocab,
                             const std::vector<TrainingExample>& examples,
                             const std::vector<TsvRecord>& passages, const Qrels& qrels,
                             const FinetuneConfig& cfg, const std::filesystem::path& out_dir);

/// Embeds passages with the passage encoder.
template <typename T>
PassageIndex build_index(DualEncoder<T>& enc, const Vocabulary& vocab,
                         const std::vector<TsvRecord>& passages, std::size_t max_len,
                         unsigned threads = 1);

template <typename T>
RetrievalRun search_queries(DualEncoder<T>& enc, const Vocabulary& vocab,
                            const PassageIndex& index, const std::vector<TsvRecord>& queries,
                            std::size_t k, std::size_t max_len, unsigned threads = 1);

}  // namespace cotmae
