// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cotmae/config.hpp"
#include "cotmae/evalindex.hpp"
#include "cotmae/finetune.hpp"
#include "cotmae/model.hpp"
#include "cotmae/pipeline.hpp"
#include "cotmae/pretrain.hpp"
#include "cotmae/synthetic.hpp"
#include "test_util.hpp"

using namespace cotmae;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kSumTol = 1e-6;
constexpr double kInitLow = 0.8, kInitHigh = 1.2;
constexpr double kPositionTol = 0.02;
constexpr double kOverfitRatio = 0.10;
constexpr double kOverfitSeconds = 300.0;
constexpr double kContextGap = 0.1;
constexpr double kPipelineMrr = 0.8;
constexpr double kPipelineSeconds = 600.0;
constexpr double kNdcgTol = 1e-6;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig tiny_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_enc_layers = 2;
  c.n_dec_layers = 1;
  c.max_seq_len = 16;
  c.dropout = 0.0;
  return c;
}

TokenSequence random_seq(std::size_t len, std::size_t vocab, Rng& rng) {
  TokenSequence s{special::kCls};
  while (s.size() < len) {
    s.push_back(static_cast<TokenId>(special::kCount + rng.below(vocab - special::kCount)));
  }
  return s;
}

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = grad_check_model(tiny_model(50), 7);
  const double secs = seconds_since(t0);
  o.note("max rel error " + num(r.max_rel_error) + " over " + std::to_string(r.coords_checked) +
         " coords (worst " + r.worst_param + ")");
  o.note(num(secs) + " s");
  o.require(r.max_rel_error < kGradTol, "error >= " + num(kGradTol));
  o.require(secs < kGradSeconds, "runtime");
  return o;
}

Outcome decomposition_and_symmetry() {
  Outcome o;
  const auto cfg = tiny_model(50);
  Rng rng(21);
  auto w = init_model<double>(cfg, rng);
  double worst_sum = 0.0, worst_sym = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TokenSequence> a, b;
    for (int i = 0; i < 4; ++i) {
      a.push_back(random_seq(6 + rng.below(11), 50, rng));
      b.push_back(random_seq(6 + rng.below(11), 50, rng));
    }
    const auto l = cotmae_loss(w, draw_pair_masks(a, b, cfg, rng), nullptr, false);
    worst_sum = std::max(worst_sum, std::abs(l.total - (l.l_smlm_a + l.l_cmlm_ab + l.l_smlm_b + l.l_cmlm_ba)));

    std::vector<MaskedSpan> enc, dec;
    for (const auto& s : a) {
      enc.push_back(apply_mask(s, cfg.enc_mask_rate, rng));
      dec.push_back(apply_mask(s, cfg.dec_mask_rate, rng));
    }
    const auto same = cotmae_loss(w, PairMasks{enc, dec, enc, dec}, nullptr, false);
    worst_sym = std::max({worst_sym, std::abs(same.l_smlm_a - same.l_smlm_b),
                          std::abs(same.l_cmlm_ab - same.l_cmlm_ba)});
  }
  o.note("sum gap " + num(worst_sum) + ", AB/BA gap " + num(worst_sym));
  o.require(worst_sum < kSumTol, "decomposition");
  o.require(worst_sym < kSumTol, "symmetry");
  return o;
}

Outcome initialization() {
  Outcome o;
  auto cfg = tiny_model(100);
  cfg.max_seq_len = 32;
  Rng rng(5);
  auto w = init_model<double>(cfg, rng);
  double sum = 0.0;
  for (int batch = 0; batch < 10; ++batch) {
    std::vector<TokenSequence> a, b;
    for (int i = 0; i < 8; ++i) {
      a.push_back(random_seq(16 + rng.below(17), 100, rng));
      b.push_back(random_seq(16 + rng.below(17), 100, rng));
    }
    sum += cotmae_loss(w, draw_pair_masks(a, b, cfg, rng), nullptr, false).total;
  }
  const double mean = sum / 10.0;
  const double ref = 4.0 * std::log(100.0);
  o.note("mean total " + num(mean) + " vs 4 ln V = " + num(ref));
  o.require(mean >= kInitLow * ref && mean <= kInitHigh * ref, "outside [0.8, 1.2] x 4 ln V");
  return o;
}

Outcome mask_contract() {
  Outcome o;
  Rng rng(11);
  std::size_t bad_count = 0, cls_masked = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto seq = random_seq(2 + rng.below(127), 100, rng);
    const double rate = i % 2 ? 0.45 : 0.30;
    const auto m = apply_mask(seq, rate, rng);
    const auto want = static_cast<std::size_t>(std::floor(rate * static_cast<double>(seq.size() - 1) + 0.5));
    if (m.mask_positions.size() != want) ++bad_count;
    if (m.input_ids[0] != special::kCls || m.labels[0] != nn::kIgnoreLabel) ++cls_masked;
  }
  o.note(std::to_string(bad_count) + " count mismatches, " + std::to_string(cls_masked) + " [CLS] masked");
  o.require(bad_count == 0, "mask counts");
  o.require(cls_masked == 0, "[CLS] masked");

  // Per-position frequency. 20 and 40 maskable positions keep rate * m
  // integral, so the realized rate equals the nominal one.
  double worst = 0.0;
  std::size_t tokens = 0;
  for (double rate : {0.30, 0.45}) {
    std::vector<double> hits(41, 0.0), seen(41, 0.0);
    std::size_t t = 0;
    while (t < 1000000) {
      const std::size_t m = rng.below(2) ? 20 : 40;
      const auto mk = apply_mask(random_seq(m + 1, 100, rng), rate, rng);
      for (std::size_t p = 1; p <= m; ++p) seen[p] += 1.0;
      for (auto p : mk.mask_positions) hits[p] += 1.0;
      t += m;
    }
    tokens += t;
    for (std::size_t p = 1; p <= 40; ++p) worst = std::max(worst, std::abs(hits[p] / seen[p] - rate));
  }
  o.note("worst positional deviation " + num(worst) + " over " + std::to_string(tokens) + " tokens");
  o.require(worst <= kPositionTol, "positional frequency");
  return o;
}

PretrainConfig overfit_config(std::size_t vocab) {
  PretrainConfig c;
  c.model = tiny_model(vocab);
  c.sampler.max_span_len = 16;
  c.optim.peak_lr = 2e-2;
  c.optim.total_steps = 500;
  c.optim.batch_size = 8;
  c.optim.weight_decay = 0.0;
  c.seed = 3;
  return c;
}

struct OverfitRun {
  std::vector<double> totals;
  TrainState<float> state;
  double seconds = 0.0;
};

OverfitRun run_overfit(const std::vector<Document>& docs, const Vocabulary& vocab,
                       const fs::path& out) {
  OverfitRun r;
  const auto cfg = overfit_config(vocab.size());
  r.state = init_train_state<float>(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, r.state, out, 0,
                [&](std::size_t, const LossBreakdown& l, double) { r.totals.push_back(l.total); });
  r.seconds = seconds_since(t0);
  return r;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

Outcome overfit(OverfitRun& run) {
  Outcome o;
  const auto& t = run.totals;
  if (t.size() < 20) {
    o.require(false, "only " + std::to_string(t.size()) + " steps recorded");
    return o;
  }
  // Averages over 10 steps smooth out the per-batch mask draw.
  const double first = mean_of(t, 0, 10);
  const double last = mean_of(t, t.size() - 10, t.size());
  o.note("loss " + num(first) + " -> " + num(last) + " (ratio " + num(last / first) + ") in " +
         std::to_string(t.size()) + " steps, " + num(run.seconds) + " s");
  o.require(last < kOverfitRatio * first, "ratio");
  o.require(run.seconds < kOverfitSeconds, "runtime");
  return o;
}

Outcome context_mechanism(OverfitRun& run, const std::vector<Document>& docs, const Vocabulary& vocab) {
  Outcome o;
  const auto cfg = overfit_config(vocab.size());
  PairFeeder feeder(docs, cfg.sampler, cfg.seed, vocab, cfg.model.max_seq_len);
  std::vector<TokenSequence> a, b;
  feeder.fetch(0, feeder.pairs_per_epoch(), a, b);
  Rng rng(99);
  const auto p = probe_context(run.state.weights, std::span<const TokenSequence>(a),
                               std::span<const TokenSequence>(b), 50, rng);
  o.note("context-MLM true " + num(p.true_context) + ", permuted " + num(p.permuted_context));
  o.require(p.permuted_context - p.true_context >= kContextGap, "gap below 0.1 nat");
  return o;
}

RunConfig pipeline_config(const fs::path& task, const fs::path& out) {
  RunConfig c;
  c.seed = 1;
  c.paths = {(task / "corpus.jsonl").string(), (task / "passages.tsv").string(),
             (task / "queries.tsv").string(), (task / "qrels.tsv").string(), out.string()};
  c.tokenizer.vocab_size = 2000;
  c.sampler.max_span_len = 24;
  c.model.d_model = 32;
  c.model.n_heads = 2;
  c.model.d_ff = 64;
  c.model.n_enc_layers = 2;
  c.model.n_dec_layers = 1;
  c.model.max_seq_len = 64;
  c.model.dropout = 0.0;
  c.optim.peak_lr = 2e-3;
  c.optim.total_steps = 800;
  c.optim.batch_size = 16;
  c.finetune.optim.peak_lr = 2e-3;
  c.finetune.optim.total_steps = 600;
  c.finetune.optim.batch_size = 8;
  c.finetune.group_negatives = 3;
  c.finetune.passage_max_len = 64;
  c.finetune.seed = c.seed;
  c.eval.k = 100;
  c.eval.metrics = {"mrr@10", "recall@50", "ndcg@10"};
  return c;
}

double metric(const MetricList& m, const std::string& name) {
  for (const auto& [k, v] : m) {
    if (k == name) return v;
  }
  return -1.0;
}

Outcome end_to_end(const PipelineResult& r, double secs) {
  Outcome o;
  const double s1 = metric(r.stage1, "mrr@10");
  const double s2 = metric(r.stage2, "mrr@10");
  o.note("MRR@10 stage1 " + num(s1) + ", stage2 " + num(s2) + ", " + num(secs) + " s");
  o.require(s1 > kPipelineMrr, "stage-1 MRR@10 <= 0.8");
  o.require(s2 >= s1, "stage 2 below stage 1");
  o.require(secs < kPipelineSeconds, "runtime");
  return o;
}

QueryResult ranked(const std::string& qid, std::initializer_list<const char*> ids) {
  QueryResult r{qid, {}};
  double s = 10.0;
  for (const char* id : ids) r.hits.push_back({id, s--});
  return r;
}

Outcome metric_oracles() {
  Outcome o;
  const Qrels q1c{{"q1", {"c"}}};
  const Qrels ab{{"q1", {"a"}}, {"q2", {"b"}}};
  const Qrels both{{"q1", {"a", "b"}}};
  const Qrels one{{"q1", {"a"}}};
  o.require(mrr_at_k({ranked("q1", {"a", "b", "c"})}, q1c, 10) == 1.0 / 3.0, "MRR 1/3");
  o.require(mrr_at_k({ranked("q1", {"a", "b", "c"})}, q1c, 2) == 0.0, "MRR cutoff");
  o.require(mrr_at_k({ranked("q1", {"a", "b"}), ranked("q2", {"a", "b"})}, ab, 10) == 0.75, "MRR mean");
  o.require(recall_at_k({ranked("q1", {"a", "b", "c"})}, both, 10) == 1.0, "Recall full");
  o.require(recall_at_k({ranked("q1", {"a", "c", "b"})}, both, 2) == 0.5, "Recall half");
  o.require(std::abs(ndcg_at_k({ranked("q1", {"a", "b"})}, one, 10) - 1.0) < kNdcgTol, "nDCG top");
  o.require(std::abs(ndcg_at_k({ranked("q1", {"b", "a"})}, one, 10) - 0.6309297535714575) < kNdcgTol,
            "nDCG rank 2");
  o.require(std::abs(ndcg_at_k({ranked("q1", {"b", "a", "c"})}, both, 10) - 1.0) < kNdcgTol, "nDCG ideal");

  Rng rng(8);
  std::size_t mismatches = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.below(200), dim = 1 + rng.below(16), k = 1 + rng.below(30);
    nn::Tensor<float> m({n, dim});
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back(std::to_string(rng.below(100000)) + "-" + std::to_string(i));
      // Coarse values so that ties actually occur.
      for (std::size_t d = 0; d < dim; ++d) m.row(i)[d] = static_cast<float>(static_cast<int>(rng.below(5)) - 2);
    }
    std::vector<float> q(dim);
    for (auto& x : q) x = static_cast<float>(static_cast<int>(rng.below(5)) - 2);
    const PassageIndex index(ids, m);
    std::vector<ScoredPassage> all;
    for (std::size_t i = 0; i < n; ++i) {
      all.push_back({ids[i], similarity(q, std::span<const float>(m.row(i), dim))});
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.score != b.score ? a.score > b.score : id_less(a.id, b.id);
    });
    all.resize(std::min(k, n));
    if (index.search(q, k) != all) ++mismatches;
  }
  o.note("metric fixtures checked, search mismatches " + std::to_string(mismatches) + "/100");
  o.require(mismatches == 0, "search vs full sort");
  return o;
}

Outcome reproducibility(const fs::path& overfit_a, const fs::path& overfit_b, const fs::path& pipe_a,
                        const fs::path& pipe_b, const fs::path& scratch) {
  Outcome o;
  std::size_t compared = 0, total = 0;
  auto same = [&](const fs::path& a, const fs::path& b, const std::string& what) {
    ++total;
    const bool ok = fs::exists(a) && fs::exists(b) && read_file(a) == read_file(b);
    o.require(ok, what + " differs");
    return ok;
  };
  compared += same(overfit_a / "metrics.csv", overfit_b / "metrics.csv", "overfit metrics.csv");
  for (const char* f : {"results.json", "pretrain/metrics.csv", "stage1/metrics.csv", "stage2/metrics.csv",
                        "stage1/run.trec", "stage2/run.trec"}) {
    compared += same(pipe_a / f, pipe_b / f, std::string("pipeline ") + f);
  }

  // Pre-training checkpoint: load and save again.
  const auto pre = load_train_state<float>(pipe_a / "pretrain" / "checkpoints" / "final.ckpt");
  save_train_state(scratch / "pre.ckpt", pre.state, pre.cfg, pre.vocab);
  compared += same(pipe_a / "pretrain" / "checkpoints" / "final.ckpt", scratch / "pre.ckpt", "pretrain checkpoint");

  // Dual-encoder checkpoint.
  const auto raw = read_checkpoint(pipe_a / "stage2" / "checkpoints" / "final.ckpt");
  auto dual = load_dual_encoder<float>(raw);
  json extra = raw.meta;
  for (const char* k : {"kind", "tied", "model", "vocab", "dtype"}) extra.erase(k);
  save_dual_encoder(scratch / "dual.ckpt", dual, checkpoint_vocab(raw), extra);
  compared += same(pipe_a / "stage2" / "checkpoints" / "final.ckpt", scratch / "dual.ckpt", "dual checkpoint");
  o.note(std::to_string(compared) + "/" + std::to_string(total) + " files byte-identical");
  return o;
}

Outcome ablation_machinery(const fs::path& root) {
  Outcome o;
  RetrievalTaskOptions opts;
  opts.n_passages = 20;
  write_retrieval_task(root / "task", make_retrieval_task(opts));
  auto c = pipeline_config(root / "task", root / "unused");
  c.model.d_model = 16;
  c.model.d_ff = 32;
  c.model.max_seq_len = 48;
  c.optim.total_steps = 4;
  c.optim.batch_size = 4;
  c.finetune.optim.total_steps = 4;
  c.finetune.optim.batch_size = 4;
  c.finetune.bm25_depth = 20;
  c.finetune.dense_depth = 20;
  c.finetune.per_query = 3;
  c.eval.k = 20;
  c.eval.metrics = {"mrr@10", "recall@10"};
  write_file(root / "config.json", to_json(c).dump(2));

  struct Expect {
    const char* grid;
    std::size_t rows;
    std::vector<std::string> keys;
  };
  const std::vector<Expect> expects{
      {"mask-rate", 6, {"model.enc_mask_rate", "model.dec_mask_rate"}},
      {"decoder-layers", 5, {"model.n_dec_layers"}},
  };
  for (const auto& e : expects) {
    const fs::path out = root / e.grid;
    const std::string cmd = std::string("\"") + COTMAE_CLI + "\" ablate --config \"" +
                            (root / "config.json").string() + "\" --grid " + e.grid + " --out \"" +
                            out.string() + "\" > \"" + (root / (std::string(e.grid) + ".out")).string() +
                            "\" 2> \"" + (root / (std::string(e.grid) + ".log")).string() + "\"";
    const int rc = std::system(cmd.c_str());
    o.require(rc == 0, std::string(e.grid) + " exit status " + std::to_string(rc));
    if (!fs::exists(out / "ablation.csv")) {
      o.require(false, std::string(e.grid) + " wrote no CSV");
      continue;
    }
    const auto lines = read_lines(out / "ablation.csv");
    std::string header = "cell";
    for (const auto& k : e.keys) header += "," + k;
    header += ",pretrain_loss,mrr@10,recall@10,status";
    o.require(!lines.empty() && lines[0] == header, std::string(e.grid) + " header");
    o.require(lines.size() == e.rows + 1, std::string(e.grid) + " row count " + std::to_string(lines.size() - 1));
    const std::size_t cols = split(header, ',').size();
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split(lines[i], ',');
      bool ok = f.size() == cols && f[0] == std::to_string(i - 1) && f.back() == "ok";
      for (std::size_t j = 1; ok && j + 1 < f.size(); ++j) {
        char* end = nullptr;
        const double v = std::strtod(f[j].c_str(), &end);
        ok = !f[j].empty() && *end == '\0' && std::isfinite(v);
      }
      o.require(ok, std::string(e.grid) + " row " + std::to_string(i - 1) + " malformed");
    }
    o.require(read_file(root / (std::string(e.grid) + ".out")) == read_file(out / "ablation.csv"),
              std::string(e.grid) + " stdout differs from CSV");
    o.note(std::string(e.grid) + ": " + std::to_string(lines.size() - 1) + " rows x " + std::to_string(cols) + " cols");
  }
  return o;
}

}  // namespace

int main() {
  test::TempDir scratch("acceptance");
  int failures = 0;
  auto report = [&](int n, const char* name, const Outcome& o) {
    std::printf("criterion %d: %s %s: %s\n", n, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [&](int n, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    report(n, name, o);
  };

  guarded(1, "gradient fidelity", gradient_fidelity);
  guarded(2, "loss decomposition and symmetry", decomposition_and_symmetry);
  guarded(3, "initialization sanity", initialization);
  guarded(4, "mask contract", mask_contract);

  const auto docs = make_overfit_corpus(8, 45, 8, 3);
  const auto vocab = train_vocab(docs, 50);
  OverfitRun first, second;
  guarded(5, "overfit", [&] {
    first = run_overfit(docs, vocab, scratch / "overfit-a");
    return overfit(first);
  });
  guarded(6, "context mechanism", [&] { return context_mechanism(first, docs, vocab); });

  write_retrieval_task(scratch / "task", make_retrieval_task({}));
  guarded(7, "end-to-end retrieval", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_pipeline(pipeline_config(scratch / "task", scratch / "pipe-a"));
    return end_to_end(r, seconds_since(t0));
  });
  guarded(8, "metric oracles", metric_oracles);
  guarded(9, "reproducibility", [&] {
    second = run_overfit(docs, vocab, scratch / "overfit-b");
    run_pipeline(pipeline_config(scratch / "task", scratch / "pipe-b"));
    return reproducibility(scratch / "overfit-a", scratch / "overfit-b", scratch / "pipe-a", scratch / "pipe-b",
                           scratch.path());
  });
  guarded(10, "ablation machinery", [&] { return ablation_machinery(scratch / "ablate"); });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
