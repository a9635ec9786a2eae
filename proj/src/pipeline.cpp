#include "cotmae/pipeline.hpp"

#include <ostream>
#include <set>

#include "cotmae/bm25.hpp"
#include "cotmae/finetune.hpp"

namespace cotmae {

Vocabulary resolve_vocab(const RunConfig& cfg, const std::vector<Document>& docs) {
  if (!cfg.tokenizer.vocab.empty()) return Vocabulary::load(cfg.tokenizer.vocab);
  return train_vocab(docs, cfg.tokenizer.vocab_size);
}

namespace {

void say(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

template <typename T>
MetricList evaluate_stage(DualEncoder<T>& enc, const Vocabulary& vocab, const RunConfig& cfg,
                          const std::vector<TsvRecord>& passages,
                          const std::vector<TsvRecord>& queries, const Qrels& qrels,
                          const std::filesystem::path& run_path) {
  const unsigned threads = cfg.worker_count();
  const auto index = build_index(enc, vocab, passages, cfg.finetune.passage_max_len, threads);
  const auto run = search_queries(enc, vocab, index, queries, cfg.eval.k,
                                  cfg.finetune.query_max_len, threads);
  write_run(run_path, run);
  return evaluate_run(run, qrels, cfg.eval.metrics);
}

json metrics_json(const MetricList& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::string describe(const MetricList& m) {
  std::string s;
  for (const auto& [k, v] : m) s += (s.empty() ? "" : " ") + k + "=" + format_double(v, 4);
  return s;
}

template <typename T>
PipelineResult run_typed(const RunConfig& cfg, std::ostream* log) {
  const std::filesystem::path out = cfg.paths.out;
  const unsigned threads = cfg.worker_count();
  const auto docs = load_documents(cfg.paths.corpus);
  const auto passages = read_tsv(cfg.paths.passages);
  const auto queries = read_tsv(cfg.paths.queries);
  const auto qrels = read_qrels(cfg.paths.qrels);
  const auto vocab = resolve_vocab(cfg, docs);

  PipelineResult res;
  auto pcfg = cfg.pretrain_config();
  pcfg.model.vocab_size = vocab.size();
  pcfg.threads = threads;
  say(log, "pretrain: " + std::to_string(docs.size()) + " documents, vocabulary " +
               std::to_string(vocab.size()));
  auto state = init_train_state<T>(pcfg);
  const auto pre = pretrain_loop(docs, vocab, pcfg, state, out / "pretrain");
  res.pretrain_checkpoint = pre.final_checkpoint;
  res.pretrain_first = pre.first;
  res.pretrain_last = pre.last;
  say(log, "pretrain: total loss " + format_double(pre.first.total, 5) + " -> " +
               format_double(pre.last.total, 5));

  const auto& fc = cfg.finetune;
  const auto pretrained = state.weights.encoder;
  Bm25Index bm25(passages, fc.bm25_k1, fc.bm25_b, threads);
  std::vector<std::string> short_q;
  const auto bm25_negs = mine_bm25(bm25, queries, qrels, fc.bm25_depth, fc.per_query, &short_q);
  if (!short_q.empty()) {
    say(log, "mine: " + std::to_string(short_q.size()) + " queries got fewer than " +
                 std::to_string(fc.per_query) + " BM25 negatives");
  }

  auto stage1 = make_dual_encoder(pretrained, fc.tied);
  const auto ex1 = build_examples(queries, qrels, bm25_negs);
  write_examples_jsonl(out / "stage1" / "examples.jsonl", ex1);
  const auto r1 = finetune_loop(stage1, vocab, ex1, passages, qrels, fc, out / "stage1");
  res.stage1_checkpoint = r1.checkpoint;
  res.stage1 = evaluate_stage(stage1, vocab, cfg, passages, queries, qrels, out / "stage1" / "run.trec");
  say(log, "stage1: " + describe(res.stage1));

  short_q.clear();
  const auto dense_negs = mine_dense(stage1, vocab, passages, queries, qrels, fc.dense_depth,
                                     fc.per_query, fc, threads, &short_q);
  auto stage2 = fc.stage2_init == "stage1" ? stage1 : make_dual_encoder(pretrained, fc.tied);
  const auto ex2 = build_examples(queries, qrels, merge_negatives(bm25_negs, dense_negs));
  write_examples_jsonl(out / "stage2" / "examples.jsonl", ex2);
  const auto r2 = finetune_loop(stage2, vocab, ex2, passages, qrels, fc, out / "stage2");
  res.stage2_checkpoint = r2.checkpoint;
  res.stage2 = evaluate_stage(stage2, vocab, cfg, passages, queries, qrels, out / "stage2" / "run.trec");
  say(log, "stage2: " + describe(res.stage2));

  json summary;
  summary["pretrain"] = {{"first_total", pre.first.total}, {"last_total", pre.last.total}};
  summary["stage1"] = metrics_json(res.stage1);
  summary["stage2"] = metrics_json(res.stage2);
  write_file(out / "results.json", summary.dump(2) + "\n");
  return res;
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, std::ostream* log) {
  for (const auto* p : {&cfg.paths.corpus, &cfg.paths.passages, &cfg.paths.queries,
                        &cfg.paths.qrels, &cfg.paths.out}) {
    if (p->empty()) throw ConfigError("pipeline needs paths.corpus, passages, queries, qrels and out");
  }
  std::filesystem::create_directories(cfg.paths.out);
  write_file(std::filesystem::path(cfg.paths.out) / "config.resolved.json",
             to_json(cfg).dump(2) + "\n");
  return cfg.precision == "f64" ? run_typed<double>(cfg, log) : run_typed<float>(cfg, log);
}

// ---------------------------------------------------------------------------
// ablations

std::vector<json> ablation_grid(const std::string& name) {
  std::vector<json> grid;
  if (name == "mask-rate") {
    for (double enc : {0.15, 0.30}) {
      for (double dec : {0.15, 0.30, 0.45}) {
        grid.push_back({{"model", {{"enc_mask_rate", enc}, {"dec_mask_rate", dec}}}});
      }
    }
  } else if (name == "decoder-layers") {
    for (std::size_t n : {1, 2, 3, 4, 6}) grid.push_back({{"model", {{"n_dec_layers", n}}}});
  } else if (name == "sampling") {
    const std::vector<std::vector<double>> mixes{{1, 0, 0},         {0, 1, 0},
                                                 {0, 0, 1},         {0.5, 0.5, 0},
                                                 {0.5, 0, 0.5},     {0, 0.5, 0.5},
                                                 {1.0 / 3, 1.0 / 3, 1.0 / 3}};
    for (const auto& m : mixes) grid.push_back({{"sampler", {{"mixture_weights", m}}}});
  } else {
    throw std::invalid_argument("unknown ablation grid '" + name +
                                "' (expected mask-rate, decoder-layers or sampling)");
  }
  return grid;
}

namespace {

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
  } else {
    out.emplace_back(prefix, j);
  }
}

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return format_double(v.get<double>(), 6);
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ";") + csv_cell(e);
    return s;
  }
  return v.dump();
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

std::string ablation_csv(const std::vector<AblationRow>& rows,
                         const std::vector<std::string>& metrics) {
  std::vector<std::string> keys;
  for (const auto& r : rows) {
    std::vector<std::pair<std::string, json>> flat;
    flatten(r.overrides, "", flat);
    for (const auto& [k, v] : flat) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  }
  std::string out = "cell";
  for (const auto& k : keys) out += "," + quote(k);
  out += ",pretrain_loss";
  for (const auto& m : metrics) out += "," + quote(m);
  out += ",status\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::vector<std::pair<std::string, json>> flat;
    flatten(r.overrides, "", flat);
    out += std::to_string(i);
    for (const auto& k : keys) {
      json v;
      for (const auto& [fk, fv] : flat) {
        if (fk == k) v = fv;
      }
      out += "," + quote(csv_cell(v));
    }
    const bool ok = r.status == "ok";
    out += "," + (ok ? format_double(r.pretrain_loss, 6) : std::string());
    for (const auto& m : metrics) {
      std::string cell;
      for (const auto& [name, v] : r.metrics) {
        if (name == m) cell = format_double(v, 6);
      }
      out += "," + cell;
    }
    out += "," + quote(r.status) + "\n";
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<json>& grid,
                                      std::ostream* log) {
  if (grid.empty()) throw std::invalid_argument("ablation grid is empty");
  const std::filesystem::path root = base.paths.out;
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    AblationRow row;
    row.overrides = grid[i];
    char name[16];
    std::snprintf(name, sizeof(name), "cell-%02zu", i);
    say(log, std::string(name) + ": " + grid[i].dump());
    try {
      auto cfg = apply_overrides(base, grid[i]);
      cfg.paths.out = (root / name).string();
      const auto res = run_pipeline(cfg, log);
      row.status = "ok";
      row.pretrain_loss = res.pretrain_last.total;
      row.metrics = res.stage2;
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      say(log, std::string(name) + " " + row.status);
    }
    rows.push_back(std::move(row));
    write_file(root / "ablation.csv", ablation_csv(rows, base.eval.metrics));
  }
  return rows;
}

}  // namespace cotmae
