#include "cotmae/config.hpp"

#include <algorithm>
#include <cmath>

namespace cotmae {

static_assert(std::is_same_v<std::uint64_t, unsigned long> ||
                  std::is_same_v<std::uint64_t, unsigned long long>,
              "unexpected uint64_t");

JsonReader::JsonReader(const json& obj, std::string path, const std::string* source)
    : obj_(obj), path_(std::move(path)), source_(source) {
  if (!obj_.is_object()) {
    throw ConfigError("config: '" + (path_.empty() ? std::string("<root>") : path_) +
                      "' must be an object");
  }
}

void JsonReader::fail(const std::string& key, const std::string& msg) const {
  const std::string full = path_.empty() ? key : path_ + "." + key;
  std::string where;
  if (source_ != nullptr) {
    const auto pos = source_->find("\"" + key + "\"");
    if (pos != std::string::npos) {
      const auto line = 1 + std::count(source_->begin(), source_->begin() + pos, '\n');
      where = " (line " + std::to_string(line) + ")";
    }
  }
  throw ConfigError("config key '" + full + "'" + where + ": " + msg);
}

bool JsonReader::has(const char* key) const { return obj_.contains(key); }

const json* JsonReader::find(const char* key) {
  auto it = obj_.find(key);
  if (it == obj_.end()) return nullptr;
  seen_.emplace_back(key);
  return &*it;
}

void JsonReader::read(const char* key, bool& dst) {
  if (const json* v = find(key)) {
    if (!v->is_boolean()) fail(key, "expected true or false");
    dst = v->get<bool>();
  }
}

void JsonReader::read(const char* key, double& dst) {
  if (const json* v = find(key)) {
    if (!v->is_number()) fail(key, "expected a number");
    dst = v->get<double>();
  }
}

void JsonReader::read(const char* key, std::size_t& dst) {
  if (const json* v = find(key)) {
    if (v->is_number_unsigned()) {
      dst = v->get<std::size_t>();
    } else if (v->is_number_integer()) {
      fail(key, "expected a non-negative integer");
    } else if (v->is_number_float() && std::floor(v->get<double>()) == v->get<double>() &&
               v->get<double>() >= 0) {
      dst = static_cast<std::size_t>(v->get<double>());
    } else {
      fail(key, "expected a non-negative integer");
    }
  }
}

void JsonReader::read(const char* key, unsigned& dst) {
  std::size_t v = dst;
  read(key, v);
  dst = static_cast<unsigned>(v);
}

void JsonReader::read(const char* key, std::string& dst) {
  if (const json* v = find(key)) {
    if (!v->is_string()) fail(key, "expected a string");
    dst = v->get<std::string>();
  }
}

void JsonReader::read(const char* key, std::vector<std::string>& dst) {
  if (const json* v = find(key)) {
    if (!v->is_array()) fail(key, "expected an array of strings");
    dst.clear();
    for (const auto& e : *v) {
      if (!e.is_string()) fail(key, "expected an array of strings");
      dst.push_back(e.get<std::string>());
    }
  }
}

void JsonReader::read(const char* key, std::vector<double>& dst) {
  if (const json* v = find(key)) {
    if (!v->is_array()) fail(key, "expected an array of numbers");
    dst.clear();
    for (const auto& e : *v) {
      if (!e.is_number()) fail(key, "expected an array of numbers");
      dst.push_back(e.get<double>());
    }
  }
}

JsonReader JsonReader::child(const char* key) {
  static const json kEmpty = json::object();
  const json* v = find(key);
  if (v == nullptr) return JsonReader(kEmpty, path_.empty() ? key : path_ + "." + key, source_);
  if (!v->is_object()) fail(key, "expected an object");
  return JsonReader(*v, path_.empty() ? key : path_ + "." + key, source_);
}

void JsonReader::finish() const {
  for (auto it = obj_.begin(); it != obj_.end(); ++it) {
    if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
      fail(it.key(), "unknown key");
    }
  }
}

// ---------------------------------------------------------------------------

json to_json(const SamplerConfig& c) {
  json j;
  j["max_span_len"] = c.max_span_len;
  j["mixture_weights"] = {c.mixture_weights[0], c.mixture_weights[1], c.mixture_weights[2]};
  j["olap_fraction"] = c.olap_fraction;
  j["epoch_seed"] = c.epoch_seed;
  return j;
}

void read_config(JsonReader& r, SamplerConfig& c) {
  r.read("max_span_len", c.max_span_len);
  std::vector<double> w(c.mixture_weights.begin(), c.mixture_weights.end());
  r.read("mixture_weights", w);
  if (w.size() != 3) r.fail("mixture_weights", "expected three weights (near, olap, rand)");
  std::copy(w.begin(), w.end(), c.mixture_weights.begin());
  r.read("olap_fraction", c.olap_fraction);
  r.read("epoch_seed", c.epoch_seed);
}

json to_json(const ModelConfig& c) {
  json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["n_enc_layers"] = c.n_enc_layers;
  j["n_dec_layers"] = c.n_dec_layers;
  j["max_seq_len"] = c.max_seq_len;
  j["enc_mask_rate"] = c.enc_mask_rate;
  j["dec_mask_rate"] = c.dec_mask_rate;
  j["dropout"] = c.dropout;
  j["bert_corruption"] = c.bert_corruption;
  return j;
}

void read_config(JsonReader& r, ModelConfig& c) {
  r.read("vocab_size", c.vocab_size);
  r.read("d_model", c.d_model);
  r.read("n_heads", c.n_heads);
  r.read("d_ff", c.d_ff);
  r.read("n_enc_layers", c.n_enc_layers);
  r.read("n_dec_layers", c.n_dec_layers);
  r.read("max_seq_len", c.max_seq_len);
  r.read("enc_mask_rate", c.enc_mask_rate);
  r.read("dec_mask_rate", c.dec_mask_rate);
  r.read("dropout", c.dropout);
  r.read("bert_corruption", c.bert_corruption);
}

json to_json(const OptimConfig& c) {
  json j;
  j["peak_lr"] = c.peak_lr;
  j["warmup_ratio"] = c.warmup_ratio;
  j["total_steps"] = c.total_steps;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["accum_steps"] = c.accum_steps;
  j["clip_norm"] = c.clip_norm;
  return j;
}

void read_config(JsonReader& r, OptimConfig& c) {
  r.read("peak_lr", c.peak_lr);
  r.read("warmup_ratio", c.warmup_ratio);
  r.read("total_steps", c.total_steps);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("eps", c.eps);
  r.read("weight_decay", c.weight_decay);
  r.read("batch_size", c.batch_size);
  r.read("accum_steps", c.accum_steps);
  r.read("clip_norm", c.clip_norm);
}

json to_json(const FinetuneConfig& c) {
  json j;
  j["optim"] = to_json(c.optim);
  j["group_negatives"] = c.group_negatives;
  j["in_batch"] = c.in_batch;
  j["tied"] = c.tied;
  j["bm25_depth"] = c.bm25_depth;
  j["dense_depth"] = c.dense_depth;
  j["per_query"] = c.per_query;
  j["stage2_init"] = c.stage2_init;
  j["bm25_k1"] = c.bm25_k1;
  j["bm25_b"] = c.bm25_b;
  j["query_max_len"] = c.query_max_len;
  j["passage_max_len"] = c.passage_max_len;
  j["seed"] = c.seed;
  return j;
}

void read_config(JsonReader& r, FinetuneConfig& c) {
  auto o = r.child("optim");
  read_config(o, c.optim);
  o.finish();
  r.read("group_negatives", c.group_negatives);
  r.read("in_batch", c.in_batch);
  r.read("tied", c.tied);
  r.read("bm25_depth", c.bm25_depth);
  r.read("dense_depth", c.dense_depth);
  r.read("per_query", c.per_query);
  r.read("stage2_init", c.stage2_init);
  r.read("bm25_k1", c.bm25_k1);
  r.read("bm25_b", c.bm25_b);
  r.read("query_max_len", c.query_max_len);
  r.read("passage_max_len", c.passage_max_len);
  r.read("seed", c.seed);
}

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("config key 'precision': expected \"f32\" or \"f64\"");
  }
  sampler.validate();
  optim.validate();
  finetune.validate();
  if (eval.k == 0) throw ConfigError("config key 'eval.k': must be >= 1");
  for (const auto& m : eval.metrics) parse_metric(m);
}

unsigned RunConfig::worker_count() const {
  const unsigned env = worker_threads();
  const unsigned want = threads == 0 ? env : std::min(threads, env);
  return deterministic ? 1 : std::max(1u, want);
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.sampler = sampler;
  p.model = model;
  p.optim = optim;
  p.seed = seed;
  p.checkpoint_every = checkpoint_every;
  p.decoder_init = decoder_init;
  return p;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["precision"] = c.precision;
  j["threads"] = c.threads;
  j["paths"] = {{"corpus", c.paths.corpus},
                {"passages", c.paths.passages},
                {"queries", c.paths.queries},
                {"qrels", c.paths.qrels},
                {"out", c.paths.out}};
  j["tokenizer"] = {{"vocab_size", c.tokenizer.vocab_size}, {"vocab", c.tokenizer.vocab}};
  j["sampler"] = to_json(c.sampler);
  j["model"] = to_json(c.model);
  j["optim"] = to_json(c.optim);
  j["pretrain"] = {{"checkpoint_every", c.checkpoint_every},
                   {"decoder_init", std::string(to_string(c.decoder_init))}};
  j["finetune"] = to_json(c.finetune);
  j["eval"] = {{"k", c.eval.k}, {"metrics", c.eval.metrics}};
  return j;
}

namespace {

void read_run_config(const json& root, const std::string* source, RunConfig& c) {
  JsonReader r(root, "", source);
  r.read("seed", c.seed);
  r.read("deterministic", c.deterministic);
  r.read("precision", c.precision);
  r.read("threads", c.threads);
  {
    auto p = r.child("paths");
    p.read("corpus", c.paths.corpus);
    p.read("passages", c.paths.passages);
    p.read("queries", c.paths.queries);
    p.read("qrels", c.paths.qrels);
    p.read("out", c.paths.out);
    p.finish();
  }
  {
    auto t = r.child("tokenizer");
    t.read("vocab_size", c.tokenizer.vocab_size);
    t.read("vocab", c.tokenizer.vocab);
    t.finish();
  }
  {
    auto s = r.child("sampler");
    read_config(s, c.sampler);
    s.finish();
  }
  {
    auto m = r.child("model");
    read_config(m, c.model);
    m.finish();
  }
  {
    auto o = r.child("optim");
    read_config(o, c.optim);
    o.finish();
  }
  {
    auto p = r.child("pretrain");
    p.read("checkpoint_every", c.checkpoint_every);
    std::string init(to_string(c.decoder_init));
    p.read("decoder_init", init);
    try {
      c.decoder_init = decoder_init_from_string(init);
    } catch (const std::invalid_argument& e) {
      p.fail("decoder_init", e.what());
    }
    p.finish();
  }
  {
    auto f = r.child("finetune");
    read_config(f, c.finetune);
    f.finish();
  }
  {
    auto e = r.child("eval");
    e.read("k", c.eval.k);
    e.read("metrics", c.eval.metrics);
    e.finish();
  }
  r.finish();
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  RunConfig c;
  read_run_config(root, &text, c);
  c.finetune.seed = c.seed;
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
  return parse_config_text(read_file(path), path.string());
}

RunConfig apply_overrides(const RunConfig& base, const json& overrides) {
  if (!overrides.is_object()) throw ConfigError("override cell must be a JSON object");
  json merged = to_json(base);
  merged.merge_patch(overrides);
  const std::string text = merged.dump(2);
  return parse_config_text(text, "override " + overrides.dump());
}

}  // namespace cotmae
