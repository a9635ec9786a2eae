#include "cotmae/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include "cotmae/config.hpp"

namespace cotmae {

void FinetuneConfig::validate() const {
  optim.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("finetune config: " + m); };
  if (stage2_init != "pretrained" && stage2_init != "stage1") {
    fail("stage2_init must be \"pretrained\" or \"stage1\"");
  }
  if (per_query > bm25_depth || per_query > dense_depth) fail("depth must be >= per_query");
  if (query_max_len < 2 || passage_max_len < 2) fail("max lengths must be >= 2");
  if (!(bm25_k1 >= 0.0) || !(bm25_b >= 0.0 && bm25_b <= 1.0)) fail("bad BM25 parameters");
}

// ---------------------------------------------------------------------------
// encoders and checkpoints

template <typename T>
std::vector<nn::Parameter<T>*> DualEncoder<T>::parameters() {
  auto out = query.parameters();
  if (!tied) {
    for (auto* p : passage.parameters()) out.push_back(p);
  }
  return out;
}

namespace {

template <typename T>
EncoderWeights<T> renamed_copy(const EncoderWeights<T>& src, const std::string& prefix) {
  EncoderWeights<T> out(src.cfg, prefix);
  auto dst = out.parameters();
  auto from = const_cast<EncoderWeights<T>&>(src).parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = from[i]->value;
  return out;
}

std::string encoder_prefix(const RawCheckpoint& ck, const std::string& role) {
  const auto kind = ck.meta.value("kind", std::string());
  if (kind == "pretrain") return "enc.";
  if (kind == "dual_encoder") {
    if (ck.meta.value("tied", true)) return "enc.";
    if (role != "query" && role != "passage") {
      throw std::invalid_argument("encoder role must be query or passage");
    }
    return role + ".enc.";
  }
  throw std::runtime_error("checkpoint kind '" + kind + "' holds no encoder");
}

}  // namespace

template <typename T>
DualEncoder<T> make_dual_encoder(const EncoderWeights<T>& pretrained, bool tied) {
  DualEncoder<T> d;
  d.tied = tied;
  if (tied) {
    d.query = renamed_copy(pretrained, "enc.");
  } else {
    d.query = renamed_copy(pretrained, "query.enc.");
    d.passage = renamed_copy(pretrained, "passage.enc.");
  }
  return d;
}

ModelConfig checkpoint_model_config(const RawCheckpoint& ck) {
  return config_from_json<ModelConfig>(ck.meta.at("model"), "model");
}

Vocabulary checkpoint_vocab(const RawCheckpoint& ck) {
  return Vocabulary(ck.meta.at("vocab").get<std::vector<std::string>>());
}

template <typename T>
EncoderWeights<T> load_encoder(const RawCheckpoint& ck, const std::string& role) {
  const auto prefix = encoder_prefix(ck, role);
  EncoderWeights<T> w(checkpoint_model_config(ck), prefix);
  for (auto* p : w.parameters()) ck.load(p->name, p->value);
  return w;
}

template <typename T>
void save_dual_encoder(const std::filesystem::path& path, DualEncoder<T>& enc,
                       const Vocabulary& vocab, const json& extra) {
  json meta;
  meta["kind"] = "dual_encoder";
  meta["tied"] = enc.tied;
  meta["model"] = to_json(enc.query.cfg);
  meta["vocab"] = vocab.tokens();
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  std::vector<NamedTensor<T>> tensors;
  for (auto* p : enc.parameters()) tensors.push_back({p->name, &p->value});
  write_checkpoint(path, meta, tensors);
}

template <typename T>
DualEncoder<T> load_dual_encoder(const RawCheckpoint& ck) {
  const auto kind = ck.meta.value("kind", std::string());
  if (kind == "pretrain") return make_dual_encoder(load_encoder<T>(ck), true);
  DualEncoder<T> d;
  d.tied = ck.meta.value("tied", true);
  d.query = load_encoder<T>(ck, "query");
  if (!d.tied) d.passage = load_encoder<T>(ck, "passage");
  return d;
}

template <typename T>
nn::Tensor<float> embed_texts(EncoderWeights<T>& enc, const Vocabulary& vocab,
                              std::span<const std::string> texts, std::size_t max_len,
                              unsigned threads, std::size_t batch) {
  if (texts.empty()) throw std::invalid_argument("embed_texts: no texts");
  const std::size_t len = std::min(max_len, enc.cfg.max_seq_len);
  const std::size_t d = enc.cfg.d_model;
  nn::Tensor<float> out({texts.size(), d});
  const std::size_t n_batches = (texts.size() + batch - 1) / batch;
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bi = lo; bi < hi; ++bi) {
      const std::size_t begin = bi * batch, end = std::min(texts.size(), begin + batch);
      std::vector<TokenSequence> seqs;
      for (std::size_t i = begin; i < end; ++i) seqs.push_back(encode(texts[i], vocab, len));
      nn::Tape<T> tape(false);
      const auto tb = make_batch(std::span<const TokenSequence>(seqs));
      const auto res = encode(tape, enc, tb, nullptr);
      const auto& ctx = res.context.value();
      for (std::size_t i = begin; i < end; ++i) {
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = static_cast<float>(ctx.at(i - begin, j));
      }
    }
  };
  const unsigned workers =
      std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_batches)));
  if (workers == 1) {
    work(0, n_batches);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back(work, n_batches * w / workers, n_batches * (w + 1) / workers);
    }
    for (auto& t : pool) t.join();
  }
  return out;
}

// ---------------------------------------------------------------------------
// negatives and examples

NegativeMap filter_negatives(const RetrievalRun& run, const Qrels& qrels, std::size_t per_query,
                             std::vector<std::string>* short_queries) {
  static const std::set<std::string> kNone;
  NegativeMap out;
  for (const auto& q : run) {
    auto it = qrels.find(q.query_id);
    const auto& rel = it == qrels.end() ? kNone : it->second;
    auto& negs = out[q.query_id];
    for (const auto& h : q.hits) {
      if (negs.size() >= per_query) break;
      if (!rel.count(h.id)) negs.push_back(h.id);
    }
    if (negs.size() < per_query && short_queries) short_queries->push_back(q.query_id);
  }
  return out;
}

NegativeMap mine_bm25(const Bm25Index& index, const std::vector<TsvRecord>& queries,
                      const Qrels& qrels, std::size_t depth, std::size_t per_query,
                      std::vector<std::string>* short_queries) {
  if (depth < per_query) throw std::invalid_argument("mining depth must be >= per_query");
  RetrievalRun run;
  for (const auto& q : queries) run.push_back({q.id, index.search(q.text, depth)});
  return filter_negatives(run, qrels, per_query, short_queries);
}

template <typename T>
NegativeMap mine_dense(DualEncoder<T>& enc, const Vocabulary& vocab,
                       const std::vector<TsvRecord>& passages,
                       const std::vector<TsvRecord>& queries, const Qrels& qrels,
                       std::size_t depth, std::size_t per_query, const FinetuneConfig& cfg,
                       unsigned threads, std::vector<std::string>* short_queries) {
  if (depth < per_query) throw std::invalid_argument("mining depth must be >= per_query");
  const auto index = build_index(enc, vocab, passages, cfg.passage_max_len, threads);
  const auto run = search_queries(enc, vocab, index, queries, depth, cfg.query_max_len, threads);
  return filter_negatives(run, qrels, per_query, short_queries);
}

NegativeMap merge_negatives(const NegativeMap& a, const NegativeMap& b) {
  NegativeMap out = a;
  for (const auto& [qid, negs] : b) {
    auto& dst = out[qid];
    for (const auto& n : negs) {
      if (std::find(dst.begin(), dst.end(), n) == dst.end()) dst.push_back(n);
    }
  }
  return out;
}

std::vector<TrainingExample> build_examples(const std::vector<TsvRecord>& queries,
                                            const Qrels& qrels, const NegativeMap& negatives) {
  std::vector<TrainingExample> out;
  for (const auto& q : queries) {
    auto it = qrels.find(q.id);
    if (it == qrels.end() || it->second.empty()) continue;
    TrainingExample ex{q.id, q.text, first_relevant(it->second), {}};
    if (auto n = negatives.find(q.id); n != negatives.end()) {
      for (const auto& id : n->second) {
        if (it->second.count(id)) continue;
        if (std::find(ex.negatives.begin(), ex.negatives.end(), id) == ex.negatives.end()) {
          ex.negatives.push_back(id);
        }
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_examples_jsonl(const std::filesystem::path& path,
                          const std::vector<TrainingExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    json j;
    j["query_id"] = ex.query_id;
    j["positive"] = ex.positive;
    j["negatives"] = ex.negatives;
    out += j.dump() + "\n";
  }
  write_file(path, out);
}

std::vector<TrainingExample> read_examples_jsonl(const std::filesystem::path& path,
                                                 const std::vector<TsvRecord>& queries) {
  std::unordered_map<std::string, std::string> text;
  for (const auto& q : queries) text[q.id] = q.text;
  std::vector<TrainingExample> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const auto j = json::parse(line);
      TrainingExample ex;
      ex.query_id = j.at("query_id").get<std::string>();
      ex.positive = j.at("positive").get<std::string>();
      ex.negatives = j.at("negatives").get<std::vector<std::string>>();
      auto it = text.find(ex.query_id);
      if (it == text.end()) throw std::runtime_error("unknown query id '" + ex.query_id + "'");
      ex.query = it->second;
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// contrastive loss

ContrastiveBatch layout_batch(std::span<const TrainingExample> examples, const Qrels& qrels,
                              bool in_batch) {
  ContrastiveBatch b;
  std::unordered_map<std::string, std::size_t> col;
  auto column = [&](const std::string& id) {
    auto [it, inserted] = col.emplace(id, b.passage_ids.size());
    if (inserted) b.passage_ids.push_back(id);
    return it->second;
  };
  for (const auto& ex : examples) {
    column(ex.positive);
    for (const auto& n : ex.negatives) column(n);
  }
  for (const auto& ex : examples) {
    b.queries.push_back(ex.query);
    std::set<std::string> rel{ex.positive};
    if (auto it = qrels.find(ex.query_id); it != qrels.end()) rel.insert(it->second.begin(), it->second.end());
    std::vector<std::uint8_t> used(b.passage_ids.size(), 0);
    std::vector<std::size_t> row{col.at(ex.positive)};
    used[row[0]] = 1;
    for (const auto& n : ex.negatives) {
      const auto c = col.at(n);
      if (used[c] || rel.count(n)) continue;
      used[c] = 1;
      row.push_back(c);
    }
    if (in_batch) {
      for (std::size_t c = 0; c < b.passage_ids.size(); ++c) {
        if (used[c] || rel.count(b.passage_ids[c])) continue;
        used[c] = 1;
        row.push_back(c);
      }
    }
    b.candidates.push_back(std::move(row));
  }
  return b;
}

template <typename T>
nn::Var<T> contrastive_loss(nn::Tape<T>& tape, DualEncoder<T>& enc, const Vocabulary& vocab,
                            const ContrastiveBatch& batch,
                            const std::unordered_map<std::string, std::string>& passage_text,
                            const FinetuneConfig& cfg, Rng* dropout_rng) {
  std::vector<TokenSequence> q, p;
  const auto q_len = std::min(cfg.query_max_len, enc.q().cfg.max_seq_len);
  const auto p_len = std::min(cfg.passage_max_len, enc.p().cfg.max_seq_len);
  for (const auto& text : batch.queries) q.push_back(encode(text, vocab, q_len));
  for (const auto& id : batch.passage_ids) {
    auto it = passage_text.find(id);
    if (it == passage_text.end()) throw std::runtime_error("unknown passage id '" + id + "'");
    p.push_back(encode(it->second, vocab, p_len));
  }
  const auto qb = make_batch(std::span<const TokenSequence>(q));
  const auto pb = make_batch(std::span<const TokenSequence>(p));
  auto qv = encode(tape, enc.q(), qb, dropout_rng).context;
  auto pv = encode(tape, enc.p(), pb, dropout_rng).context;
  auto scores = nn::matmul(qv, pv, true);
  return nn::candidate_cross_entropy(scores, batch.candidates);
}

// ---------------------------------------------------------------------------
// training loop

template <typename T>
FinetuneResult finetune_loop(DualEncoder<T>& enc, const Vocabulary& vocab,
                             const std::vector<TrainingExample>& examples,
                             const std::vector<TsvRecord>& passages, const Qrels& qrels,
                             const FinetuneConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  if (examples.empty()) throw std::invalid_argument("no training examples");
  std::unordered_map<std::string, std::string> passage_text;
  for (const auto& p : passages) passage_text[p.id] = p.text;

  const auto params = enc.parameters();
  AdamState<T> adam(params);
  Rng rng(derive_seed(cfg.seed, 0xF17E));
  Rng* dropout_rng = enc.q().cfg.dropout > 0.0 ? &rng : nullptr;
  const auto& oc = cfg.optim;
  const std::size_t n = examples.size();
  const std::size_t bsz = std::min(oc.batch_size, n);

  std::filesystem::create_directories(out_dir / "checkpoints");
  std::ofstream metrics(out_dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (out_dir / "metrics.csv").string());
  metrics << "step,loss,lr\n";

  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  FinetuneResult result;
  for (std::size_t k = 1; k <= oc.total_steps; ++k) {
    std::vector<TrainingExample> group;
    for (std::size_t i = 0; i < bsz; ++i) {
      const std::size_t g = (k - 1) * bsz + i;
      if (g / n != order_epoch) {
        order_epoch = g / n;
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(cfg.seed, 0x5EED, order_epoch));
        for (std::size_t j = n; j > 1; --j) std::swap(order[j - 1], order[shuffle.below(j)]);
      }
      TrainingExample ex = examples[order[g % n]];
      auto& pool = ex.negatives;
      const std::size_t take = std::min(cfg.group_negatives, pool.size());
      for (std::size_t j = 0; j < take; ++j) std::swap(pool[j], pool[j + rng.below(pool.size() - j)]);
      pool.resize(take);
      group.push_back(std::move(ex));
    }
    const auto batch = layout_batch(group, qrels, cfg.in_batch);

    for (auto* p : params) p->zero_grad();
    nn::Tape<T> tape;
    auto loss = contrastive_loss(tape, enc, vocab, batch, passage_text, cfg, dropout_rng);
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) {
      throw std::runtime_error("non-finite fine-tuning loss at step " + std::to_string(k));
    }
    tape.backward(loss);
    if (oc.clip_norm > 0.0) clip_grad_norm(params, oc.clip_norm);
    const double lr = lr_at(k, oc);
    adamw_step(params, adam, lr, oc);

    metrics << k << ',' << format_double(value, 9) << ',' << format_double(lr, 9) << '\n';
    if (k == 1) result.first_loss = value;
    result.last_loss = value;
  }
  metrics.flush();
  result.checkpoint = out_dir / "checkpoints" / "final.ckpt";
  save_dual_encoder(result.checkpoint, enc, vocab, json{{"steps", oc.total_steps}});
  return result;
}

template <typename T>
PassageIndex build_index(DualEncoder<T>& enc, const Vocabulary& vocab,
                         const std::vector<TsvRecord>& passages, std::size_t max_len,
                         unsigned threads) {
  std::vector<std::string> ids, texts;
  for (const auto& p : passages) {
    ids.push_back(p.id);
    texts.push_back(p.text);
  }
  auto m = embed_texts(enc.p(), vocab, texts, max_len, threads);
  return PassageIndex(std::move(ids), std::move(m));
}

template <typename T>
RetrievalRun search_queries(DualEncoder<T>& enc, const Vocabulary& vocab,
                            const PassageIndex& index, const std::vector<TsvRecord>& queries,
                            std::size_t k, std::size_t max_len, unsigned threads) {
  std::vector<std::string> texts;
  for (const auto& q : queries) texts.push_back(q.text);
  const auto qm = embed_texts(enc.q(), vocab, texts, max_len, threads);
  auto hits = index.search_many(qm, k, threads);
  RetrievalRun run;
  for (std::size_t i = 0; i < queries.size(); ++i) run.push_back({queries[i].id, std::move(hits[i])});
  return run;
}

#define COTMAE_INSTANTIATE_FINETUNE(T)                                                         \
  template struct DualEncoder<T>;                                                              \
  template DualEncoder<T> make_dual_encoder(const EncoderWeights<T>&, bool);                   \
  template EncoderWeights<T> load_encoder(const RawCheckpoint&, const std::string&);           \
  template void save_dual_encoder(const std::filesystem::path&, DualEncoder<T>&,               \
                                  const Vocabulary&, const json&);                             \
  template DualEncoder<T> load_dual_encoder(const RawCheckpoint&);                             \
  template nn::Tensor<float> embed_texts(EncoderWeights<T>&, const Vocabulary&,                \
                                         std::span<const std::string>, std::size_t, unsigned,  \
                                         std::size_t);                                         \
  template NegativeMap mine_dense(DualEncoder<T>&, const Vocabulary&,                          \
                                  const std::vector<TsvRecord>&, const std::vector<TsvRecord>&, \
                                  const Qrels&, std::size_t, std::size_t,                      \
                                  const FinetuneConfig&, unsigned, std::vector<std::string>*); \
  template nn::Var<T> contrastive_loss(nn::Tape<T>&, DualEncoder<T>&, const Vocabulary&,       \
                                       const ContrastiveBatch&,                                \
                                       const std::unordered_map<std::string, std::string>&,    \
                                       const FinetuneConfig&, Rng*);                           \
  template FinetuneResult finetune_loop(DualEncoder<T>&, const Vocabulary&,                    \
                                        const std::vector<TrainingExample>&,                   \
                                        const std::vector<TsvRecord>&, const Qrels&,           \
                                        const FinetuneConfig&, const std::filesystem::path&);  \
  template PassageIndex build_index(DualEncoder<T>&, const Vocabulary&,                        \
                                    const std::vector<TsvRecord>&, std::size_t, unsigned);     \
  template RetrievalRun search_queries(DualEncoder<T>&, const Vocabulary&, const PassageIndex&, \
                                       const std::vector<TsvRecord>&, std::size_t, std::size_t, \
                                       unsigned);

COTMAE_INSTANTIATE_FINETUNE(float)
COTMAE_INSTANTIATE_FINETUNE(double)

#undef COTMAE_INSTANTIATE_FINETUNE

}  // namespace cotmae
