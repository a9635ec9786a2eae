#include "cotmae/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "cotmae/config.hpp"

namespace cotmae {

void OptimConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("optim config: " + m); };
  if (!(peak_lr > 0.0)) fail("peak_lr must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in [0, 1)");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail("betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (accum_steps < 1) fail("accum_steps must be >= 1");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
}

double lr_at(std::size_t step, const OptimConfig& cfg) {
  const double total = static_cast<double>(cfg.total_steps);
  const double s = static_cast<double>(std::min(step, cfg.total_steps));
  const double warm = cfg.warmup_ratio * total;
  if (warm > 0.0 && s <= warm) return cfg.peak_lr * s / warm;
  return cfg.peak_lr * (total - s) / (total - warm);
}

template <typename T>
AdamState<T>::AdamState(const std::vector<nn::Parameter<T>*>& params) {
  for (auto* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

template <typename T>
void adamw_step(const std::vector<nn::Parameter<T>*>& params, AdamState<T>& state, double lr,
                const OptimConfig& cfg) {
  if (state.m.size() != params.size()) state = AdamState<T>(params);
  for (auto* p : params) {
    if (!p->grad.all_finite()) {
      throw std::runtime_error("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double shrink = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = static_cast<double>(p.grad[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) * shrink - update);
    }
  }
}

template <typename T>
double clip_grad_norm(const std::vector<nn::Parameter<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    for (T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) scale_grads(params, static_cast<T>(max_norm / norm));
  return norm;
}

template <typename T>
void scale_grads(const std::vector<nn::Parameter<T>*>& params, T factor) {
  for (auto* p : params) {
    for (auto& g : p->grad.values()) g *= factor;
  }
}

template <typename T>
std::array<double, 5> TrainState<T>::running_mean() const {
  std::array<double, 5> out{};
  if (step == 0) return out;
  for (std::size_t i = 0; i < 5; ++i) out[i] = loss_sum[i] / static_cast<double>(step);
  return out;
}

template <typename T>
TrainState<T> init_train_state(const PretrainConfig& cfg) {
  cfg.model.validate();
  Rng init_rng(derive_seed(cfg.seed, 0x1417));
  TrainState<T> s;
  s.weights = init_model<T>(cfg.model, init_rng, cfg.decoder_init);
  s.adam = AdamState<T>(s.weights.parameters());
  s.rng = Rng(derive_seed(cfg.seed, 0x7261));
  return s;
}

// ---------------------------------------------------------------------------
// checkpoints

template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& state,
                      const PretrainConfig& cfg, const Vocabulary& vocab) {
  auto& w = const_cast<ModelWeights<T>&>(state.weights);
  const auto params = w.parameters();
  json meta;
  meta["kind"] = "pretrain";
  meta["step"] = state.step;
  meta["seed"] = cfg.seed;
  meta["checkpoint_every"] = cfg.checkpoint_every;
  meta["decoder_init"] = std::string(to_string(cfg.decoder_init));
  meta["model"] = to_json(state.weights.cfg);
  meta["sampler"] = to_json(cfg.sampler);
  meta["optim"] = to_json(cfg.optim);
  meta["rng"] = state.rng.state();
  meta["loss_sum"] = state.loss_sum;
  meta["adam_t"] = state.adam.t;
  meta["vocab"] = vocab.tokens();

  std::vector<NamedTensor<T>> tensors;
  for (auto* p : params) tensors.push_back({p->name, &p->value});
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({"adam.m/" + params[i]->name, &state.adam.m[i]});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({"adam.v/" + params[i]->name, &state.adam.v[i]});
  }
  write_checkpoint(path, meta, tensors);
}

template <typename T>
LoadedTrainState<T> load_train_state(const std::filesystem::path& path) {
  const auto ck = read_checkpoint(path);
  if (ck.meta.value("kind", std::string()) != "pretrain") {
    throw std::runtime_error(path.string() + " is not a pre-training checkpoint");
  }
  LoadedTrainState<T> out;
  auto& cfg = out.cfg;
  cfg.model = config_from_json<ModelConfig>(ck.meta.at("model"), "model");
  cfg.sampler = config_from_json<SamplerConfig>(ck.meta.at("sampler"), "sampler");
  cfg.optim = config_from_json<OptimConfig>(ck.meta.at("optim"), "optim");
  cfg.seed = ck.meta.at("seed").get<std::uint64_t>();
  cfg.checkpoint_every = ck.meta.at("checkpoint_every").get<std::size_t>();
  cfg.decoder_init = decoder_init_from_string(ck.meta.at("decoder_init").get<std::string>());
  out.vocab = Vocabulary(ck.meta.at("vocab").get<std::vector<std::string>>());

  auto& s = out.state;
  s.weights = ModelWeights<T>(cfg.model);
  const auto params = s.weights.parameters();
  s.adam = AdamState<T>(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.load(params[i]->name, params[i]->value);
    ck.load("adam.m/" + params[i]->name, s.adam.m[i]);
    ck.load("adam.v/" + params[i]->name, s.adam.v[i]);
  }
  s.adam.t = ck.meta.at("adam_t").get<std::size_t>();
  s.step = ck.meta.at("step").get<std::size_t>();
  s.rng.restore(ck.meta.at("rng").get<std::string>());
  s.loss_sum = ck.meta.at("loss_sum").get<std::array<double, 5>>();
  return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step-%08zu.ckpt", step);
  return out_dir / "checkpoints" / name;
}

// ---------------------------------------------------------------------------
// data

PairFeeder::PairFeeder(std::span<const Document> docs, const SamplerConfig& sampler,
                       std::uint64_t seed, const Vocabulary& vocab, std::size_t max_len,
                       unsigned threads)
    : docs_(docs),
      sampler_(sampler),
      seed_(seed),
      vocab_(vocab),
      max_len_(max_len),
      threads_(std::max(1u, threads)) {
  if (docs.empty()) throw std::invalid_argument("pre-training corpus is empty");
  load_epoch(0);
  per_epoch_ = a_.size();
  if (per_epoch_ == 0) throw std::invalid_argument("no document yields a span pair");
}

void PairFeeder::load_epoch(std::size_t epoch) {
  if (epoch == epoch_) return;
  std::size_t skipped = 0;
  auto pairs = build_pretrain_pairs(docs_, sampler_, epoch, threads_, &skipped);
  skipped_ = skipped;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, 0x5348, epoch));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  a_.clear();
  b_.clear();
  for (auto i : order) {
    a_.push_back(encode(pairs[i].a.text, vocab_, max_len_));
    b_.push_back(encode(pairs[i].b.text, vocab_, max_len_));
  }
  if (per_epoch_ != 0 && a_.size() != per_epoch_) {
    throw std::runtime_error("pair count changed between epochs");
  }
  epoch_ = epoch;
}

void PairFeeder::fetch(std::size_t start, std::size_t count, std::vector<TokenSequence>& a,
                       std::vector<TokenSequence>& b) {
  a.clear();
  b.clear();
  for (std::size_t g = start; g < start + count; ++g) {
    load_epoch(g / per_epoch_);
    a.push_back(a_[g % per_epoch_]);
    b.push_back(b_[g % per_epoch_]);
  }
}

// ---------------------------------------------------------------------------
// loop

namespace {

std::string metrics_row(std::size_t step, const LossBreakdown& l, double lr) {
  std::string row = std::to_string(step);
  for (double v : {l.l_smlm_a, l.l_cmlm_ab, l.l_smlm_b, l.l_cmlm_ba, l.total, lr}) {
    row += ',';
    row += format_double(v, 9);
  }
  return row;
}

/// Keeps the header and rows up to `step` of an existing metrics file.
void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
  std::string kept = std::string(kMetricsHeader) + "\n";
  if (std::filesystem::exists(path)) {
    const auto lines = read_lines(path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto comma = lines[i].find(',');
      if (std::stoull(lines[i].substr(0, comma)) <= step) kept += lines[i] + "\n";
    }
  }
  write_file(path, kept);
}

}  // namespace

template <typename T>
PretrainResult pretrain_loop(std::span<const Document> docs, const Vocabulary& vocab,
                             const PretrainConfig& cfg, TrainState<T>& state,
                             const std::filesystem::path& out_dir, std::size_t stop_at,
                             const StepCallback& on_step) {
  cfg.model.validate();
  cfg.optim.validate();
  cfg.sampler.validate();
  if (state.weights.cfg.vocab_size != vocab.size()) {
    throw std::invalid_argument("model vocab_size " + std::to_string(state.weights.cfg.vocab_size) +
                                " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  const auto params = state.weights.parameters();
  if (state.adam.m.size() != params.size()) state.adam = AdamState<T>(params);

  const std::size_t max_len = std::min(cfg.sampler.max_span_len, cfg.model.max_seq_len);
  PairFeeder feeder(docs, cfg.sampler, cfg.seed, vocab, max_len, cfg.threads);

  std::filesystem::create_directories(out_dir / "checkpoints");
  const auto metrics_path = out_dir / "metrics.csv";
  truncate_metrics(metrics_path, state.step);
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());

  const auto& oc = cfg.optim;
  const std::size_t end = stop_at == 0 ? oc.total_steps : std::min(stop_at, oc.total_steps);
  Rng* dropout_rng = cfg.model.dropout > 0.0 ? &state.rng : nullptr;
  std::filesystem::path last_good;
  PretrainResult result;
  std::vector<TokenSequence> a, b;

  while (state.step < end) {
    const std::size_t k = state.step + 1;
    for (auto* p : params) p->zero_grad();
    LossBreakdown mean;
    for (std::size_t j = 0; j < oc.accum_steps; ++j) {
      feeder.fetch(((k - 1) * oc.accum_steps + j) * oc.batch_size, oc.batch_size, a, b);
      const auto masks = draw_pair_masks(a, b, state.weights.cfg, state.rng);
      const auto l = cotmae_loss(state.weights, masks, dropout_rng, true);
      mean.l_smlm_a += l.l_smlm_a;
      mean.l_cmlm_ab += l.l_cmlm_ab;
      mean.l_smlm_b += l.l_smlm_b;
      mean.l_cmlm_ba += l.l_cmlm_ba;
      mean.total += l.total;
    }
    const double inv = 1.0 / static_cast<double>(oc.accum_steps);
    mean.l_smlm_a *= inv;
    mean.l_cmlm_ab *= inv;
    mean.l_smlm_b *= inv;
    mean.l_cmlm_ba *= inv;
    mean.total *= inv;
    if (!std::isfinite(mean.total)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(k) +
                               (last_good.empty() ? std::string("; no checkpoint saved yet")
                                                  : "; last good checkpoint " + last_good.string()));
    }
    if (oc.accum_steps > 1) scale_grads(params, static_cast<T>(inv));
    if (oc.clip_norm > 0.0) clip_grad_norm(params, oc.clip_norm);
    const double lr = lr_at(k, oc);
    adamw_step(params, state.adam, lr, oc);

    state.step = k;
    const double terms[5] = {mean.l_smlm_a, mean.l_cmlm_ab, mean.l_smlm_b, mean.l_cmlm_ba,
                             mean.total};
    for (std::size_t i = 0; i < 5; ++i) state.loss_sum[i] += terms[i];
    metrics << metrics_row(k, mean, lr) << '\n';
    metrics.flush();
    if (result.steps == 0) result.first = mean;
    result.last = mean;
    ++result.steps;
    if (on_step) on_step(k, mean, lr);

    if (cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0) {
      last_good = checkpoint_path(out_dir, k);
      save_train_state(last_good, state, cfg, vocab);
    }
  }
  result.final_checkpoint = out_dir / "checkpoints" / "final.ckpt";
  save_train_state(result.final_checkpoint, state, cfg, vocab);
  return result;
}

#define COTMAE_INSTANTIATE_PRETRAIN(T)                                                       \
  template struct AdamState<T>;                                                              \
  template struct TrainState<T>;                                                             \
  template void adamw_step(const std::vector<nn::Parameter<T>*>&, AdamState<T>&, double,     \
                           const OptimConfig&);                                              \
  template double clip_grad_norm(const std::vector<nn::Parameter<T>*>&, double);             \
  template void scale_grads(const std::vector<nn::Parameter<T>*>&, T);                       \
  template TrainState<T> init_train_state(const PretrainConfig&);                            \
  template void save_train_state(const std::filesystem::path&, const TrainState<T>&,         \
                                 const PretrainConfig&, const Vocabulary&);                  \
  template LoadedTrainState<T> load_train_state(const std::filesystem::path&);               \
  template PretrainResult pretrain_loop(std::span<const Document>, const Vocabulary&,        \
                                        const PretrainConfig&, TrainState<T>&,               \
                                        const std::filesystem::path&, std::size_t,           \
                                        const StepCallback&);

COTMAE_INSTANTIATE_PRETRAIN(float)
COTMAE_INSTANTIATE_PRETRAIN(double)

#undef COTMAE_INSTANTIATE_PRETRAIN

}  // namespace cotmae
