#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotmae/checkpoint.hpp"
#include "cotmae/corpus.hpp"
#include "cotmae/model.hpp"
#include "cotmae/tokenizer.hpp"

namespace cotmae {

struct OptimConfig {
  double peak_lr = 1e-4;
  double warmup_ratio = 0.1;
  std::size_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Sequences per micro-batch; the effective batch is batch_size * accum_steps.
  std::size_t batch_size = 32;
  std::size_t accum_steps = 1;
  /// Global gradient-norm cap; 0 disables clipping.
  double clip_norm = 1.0;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

/// Linear warmup 0 -> peak over warmup_ratio * total_steps, then linear decay
/// to 0 at total_steps. Update number k (1-based) uses lr_at(k).
double lr_at(std::size_t step, const OptimConfig& cfg);

template <typename T>
struct AdamState {
  std::vector<nn::Tensor<T>> m;
  std::vector<nn::Tensor<T>> v;
  std::size_t t = 0;

  AdamState() = default;
  explicit AdamState(const std::vector<nn::Parameter<T>*>& params);
};

/// One AdamW update with bias correction. Decoupled decay
/// θ <- θ - lr * wd * θ applies only to parameters with decay set. Throws
/// naming the parameter when a gradient is non-finite.
template <typename T>
void adamw_step(const std::vector<nn::Parameter<T>*>& params, AdamState<T>& state, double lr,
                const OptimConfig& cfg);

/// Scales all grads so their global L2 norm is at most max_norm. Returns the
/// norm before scaling.
template <typename T>
double clip_grad_norm(const std::vector<nn::Parameter<T>*>& params, double max_norm);

template <typename T>
void scale_grads(const std::vector<nn::Parameter<T>*>& params, T factor);

struct PretrainConfig {
  SamplerConfig sampler;
  ModelConfig model;
  OptimConfig optim;
  std::uint64_t seed = 42;
  /// Save every K steps (0: final checkpoint only).
  std::size_t checkpoint_every = 0;
  DecoderInit decoder_init = DecoderInit::random;
  /// Workers for pair construction; training math is single-threaded.
  unsigned threads = 1;
};

template <typename T>
struct TrainState {
  std::size_t step = 0;
  ModelWeights<T> weights;
  AdamState<T> adam;
  Rng rng;
  /// Sums of l_smlm_a, l_cmlm_ab, l_smlm_b, l_cmlm_ba, total over all steps.
  std::array<double, 5> loss_sum{};

  std::array<double, 5> running_mean() const;
};

template <typename T>
TrainState<T> init_train_state(const PretrainConfig& cfg);

/// Pre-training checkpoint: config, vocabulary, weights, moments, step, RNG.
template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& state,
                      const PretrainConfig& cfg, const Vocabulary& vocab);

template <typename T>
struct LoadedTrainState {
  TrainState<T> state;
  PretrainConfig cfg;
  Vocabulary vocab;
};

template <typename T>
LoadedTrainState<T> load_train_state(const std::filesystem::path& path);

/// Tokenized span pairs in training order. Epoch e holds one pair per
/// document, shuffled by a seed derived from (seed, e). Global pair index g
/// maps to epoch g / pairs_per_epoch, so any step can be produced directly.
class PairFeeder {
 public:
  PairFeeder(std::span<const Document> docs, const SamplerConfig& sampler, std::uint64_t seed,
             const Vocabulary& vocab, std::size_t max_len, unsigned threads = 1);

  std::size_t pairs_per_epoch() const noexcept { return per_epoch_; }
  std::size_t skipped() const noexcept { return skipped_; }
  /// Pairs [start, start + count) of the global sequence.
  void fetch(std::size_t start, std::size_t count, std::vector<TokenSequence>& a,
             std::vector<TokenSequence>& b);

 private:
  void load_epoch(std::size_t epoch);

  std::span<const Document> docs_;
  SamplerConfig sampler_;
  std::uint64_t seed_;
  const Vocabulary& vocab_;
  std::size_t max_len_;
  unsigned threads_;
  std::size_t per_epoch_ = 0;
  std::size_t skipped_ = 0;
  std::size_t epoch_ = static_cast<std::size_t>(-1);
  std::vector<TokenSequence> a_, b_;
};

struct PretrainResult {
  std::filesystem::path final_checkpoint;
  std::size_t steps = 0;
  LossBreakdown first;
  LossBreakdown last;
};

using StepCallback = std::function<void(std::size_t step, const LossBreakdown&, double lr)>;

/// Runs steps state.step+1 .. cfg.optim.total_steps (or up to stop_at when
/// non-zero). Writes out_dir/metrics.csv and out_dir/checkpoints/. When
/// resuming, metrics rows past the resumed step are dropped first. A
/// non-finite loss aborts, leaving the last saved checkpoint in place.
template <typename T>
PretrainResult pretrain_loop(std::span<const Document> docs, const Vocabulary& vocab,
                             const PretrainConfig& cfg, TrainState<T>& state,
                             const std::filesystem::path& out_dir, std::size_t stop_at = 0,
                             const StepCallback& on_step = {});

inline constexpr char kMetricsHeader[] = "step,l_smlm_a,l_cmlm_ab,l_smlm_b,l_cmlm_ba,total,lr";

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step);

}  // namespace cotmae
