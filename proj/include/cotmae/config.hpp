#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotmae/checkpoint.hpp"
#include "cotmae/corpus.hpp"
#include "cotmae/finetune.hpp"
#include "cotmae/model.hpp"
#include "cotmae/pretrain.hpp"

namespace cotmae {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Strict view of one JSON object: every key must be consumed by read() or
/// child() before finish(), otherwise the leftover key is reported with its
/// dotted path and source line.
class JsonReader {
 public:
  JsonReader(const json& obj, std::string path, const std::string* source = nullptr);

  bool has(const char* key) const;
  void read(const char* key, bool& dst);
  void read(const char* key, double& dst);
  void read(const char* key, std::size_t& dst);
  void read(const char* key, unsigned& dst);
  void read(const char* key, std::string& dst);
  void read(const char* key, std::vector<std::string>& dst);
  void read(const char* key, std::vector<double>& dst);
  JsonReader child(const char* key);
  void finish() const;

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const;

 private:
  const json* find(const char* key);

  const json& obj_;
  std::string path_;
  const std::string* source_;
  std::vector<std::string> seen_;
};

json to_json(const SamplerConfig& c);
json to_json(const ModelConfig& c);
json to_json(const OptimConfig& c);
json to_json(const FinetuneConfig& c);

void read_config(JsonReader& r, SamplerConfig& c);
void read_config(JsonReader& r, ModelConfig& c);
void read_config(JsonReader& r, OptimConfig& c);
void read_config(JsonReader& r, FinetuneConfig& c);

/// Reads a section from an already-trusted JSON value (checkpoint headers).
template <typename C>
C config_from_json(const json& j, const std::string& what) {
  C c;
  JsonReader r(j, what);
  read_config(r, c);
  r.finish();
  return c;
}

struct PathsConfig {
  std::string corpus;
  std::string passages;
  std::string queries;
  std::string qrels;
  std::string out;
};

struct TokenizerConfig {
  /// Target vocabulary size when training one from the corpus.
  std::size_t vocab_size = 8000;
  /// Existing vocabulary file; overrides training when set.
  std::string vocab;
};

struct EvalConfig {
  std::size_t k = 1000;
  std::vector<std::string> metrics{"mrr@10", "recall@50", "recall@1000", "ndcg@10"};
};

/// Everything a pipeline run needs, mirrored one-to-one by the JSON file.
struct RunConfig {
  std::uint64_t seed = 42;
  bool deterministic = true;
  /// "f32" for training, "f64" for verification runs.
  std::string precision = "f32";
  /// Worker cap; 0 defers to COTMAE_THREADS.
  unsigned threads = 0;
  PathsConfig paths;
  TokenizerConfig tokenizer;
  SamplerConfig sampler;
  ModelConfig model;
  OptimConfig optim;
  std::size_t checkpoint_every = 0;
  DecoderInit decoder_init = DecoderInit::random;
  FinetuneConfig finetune;
  EvalConfig eval;

  void validate() const;
  unsigned worker_count() const;
  PretrainConfig pretrain_config() const;
};

json to_json(const RunConfig& c);

/// Parses JSON text strictly; `origin` names the source in messages.
RunConfig parse_config_text(const std::string& text, const std::string& origin = "config");
RunConfig parse_config(const std::filesystem::path& path);

/// Applies a JSON object of overrides (same layout as the config file) on top
/// of `base`. Used for ablation cells.
RunConfig apply_overrides(const RunConfig& base, const json& overrides);

}  // namespace cotmae
