// Command-line front end. Every command resolves a RunConfig (defaults, then
// --config, then flags), prints it to stderr and writes config.resolved.json
// into its run directory when it has one.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cotmae/bm25.hpp"
#include "cotmae/config.hpp"
#include "cotmae/finetune.hpp"
#include "cotmae/pipeline.hpp"
#include "cotmae/synthetic.hpp"

namespace fs = std::filesystem;
using namespace cotmae;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::exists(path)) throw UsageError(std::string(flag) + " " + path + ": no such file");
}

/// "near,olap,rand=1,1,1", "1,1,1" or "rand,near=2,1" (unnamed entries get 0).
std::vector<double> parse_mixture(const std::string& text) {
  std::vector<std::string> names{"near", "olap", "rand"};
  std::string values = text;
  if (auto eq = text.find('='); eq != std::string::npos) {
    names = split(text.substr(0, eq), ',');
    values = text.substr(eq + 1);
  }
  const auto parts = split(values, ',');
  if (parts.size() != names.size()) throw UsageError("--mixture: names and weights differ in count");
  std::vector<double> w(3, 0.0);
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto s = static_cast<std::size_t>(strategy_from_string(trim(names[i])));
    try {
      w[s] = std::stod(parts[i]);
    } catch (const std::exception&) {
      throw UsageError("--mixture: bad weight '" + parts[i] + "'");
    }
    if (!(w[s] >= 0.0)) throw UsageError("--mixture: weights must be non-negative");
  }
  // relative weights on the command line, normalized for the config
  const double sum = w[0] + w[1] + w[2];
  if (!(sum > 0.0)) throw UsageError("--mixture: weights sum to zero");
  for (auto& x : w) x /= sum;
  return w;
}

/// Flags that map onto config keys. Only flags actually given end up in the
/// patch, so file values survive otherwise.
class ConfigFlags {
 public:
  explicit ConfigFlags(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_file_, "JSON run config")->check(CLI::ExistingFile);
    add<unsigned>("--threads", "/threads", "worker cap (COTMAE_THREADS also applies)");
    add<std::string>("--precision", "/precision", "f32 or f64");
    auto* det = app_->add_flag("--deterministic,!--no-deterministic", deterministic_,
                               "single-threaded, bitwise reproducible run");
    patches_.push_back([this, det](json& p) {
      if (det->count()) p["deterministic"] = deterministic_;
    });
  }

  template <typename V>
  CLI::Option* add(const std::string& flag, const std::string& pointer, const std::string& help) {
    auto v = std::make_shared<V>();
    auto* opt = app_->add_option(flag, *v, help);
    patches_.push_back([v, opt, pointer](json& p) {
      if (opt->count()) p[json::json_pointer(pointer)] = *v;
    });
    return opt;
  }

  CLI::Option* mixture() {
    auto v = std::make_shared<std::string>();
    auto* opt = app_->add_option("--mixture", *v, "near,olap,rand=1,1,1");
    patches_.push_back([v, opt](json& p) {
      if (opt->count()) p["sampler"]["mixture_weights"] = parse_mixture(*v);
    });
    return opt;
  }

  RunConfig resolve() const {
    RunConfig base = config_file_.empty() ? RunConfig{} : parse_config(config_file_);
    json patch = json::object();
    for (const auto& f : patches_) f(patch);
    return patch.empty() ? base : apply_overrides(base, patch);
  }

 private:
  CLI::App* app_;
  std::string config_file_;
  bool deterministic_ = true;
  std::vector<std::function<void(json&)>> patches_;
};

void announce(const RunConfig& cfg, const std::string& run_dir = {}) {
  const auto text = to_json(cfg).dump(2);
  std::cerr << "effective config:\n" << text << "\n";
  if (!run_dir.empty()) write_file(fs::path(run_dir) / "config.resolved.json", text + "\n");
}

template <typename T>
DualEncoder<T> load_for_finetune(const RawCheckpoint& ck, bool tied) {
  auto enc = load_dual_encoder<T>(ck);
  if (enc.tied && !tied) return make_dual_encoder(enc.query, false);
  if (!enc.tied && tied) throw UsageError("cannot tie an untied dual-encoder checkpoint");
  return enc;
}

void print_metrics(const MetricList& m) {
  for (const auto& [k, v] : m) std::printf("%s\t%s\n", k.c_str(), format_double(v, 6).c_str());
}

// ---------------------------------------------------------------------------

struct BuildPairsArgs {
  std::string corpus, out;
  std::uint64_t epoch = 0;
};

void cmd_build_pairs(const BuildPairsArgs& a, const RunConfig& cfg) {
  require_file(a.corpus, "--corpus");
  if (a.out.empty()) throw UsageError("--out is required");
  announce(cfg);
  const auto docs = load_documents(a.corpus);
  std::size_t skipped = 0;
  const auto pairs = build_pretrain_pairs(docs, cfg.sampler, a.epoch, cfg.worker_count(), &skipped);
  write_pairs_jsonl(a.out, pairs);
  std::cerr << "wrote " << pairs.size() << " pairs to " << a.out << " (" << skipped
            << " documents skipped)\n";
}

struct PretrainArgs {
  std::string resume;
  std::size_t stop_at = 0;
};

template <typename T>
void run_pretrain(const PretrainArgs& a, const RunConfig& rc) {
  const auto docs = load_documents(rc.paths.corpus);
  PretrainConfig cfg;
  Vocabulary vocab;
  TrainState<T> state;
  if (!a.resume.empty()) {
    auto loaded = load_train_state<T>(a.resume);
    state = std::move(loaded.state);
    cfg = loaded.cfg;
    vocab = std::move(loaded.vocab);
    std::cerr << "resuming at step " << state.step << "\n";
  } else {
    vocab = resolve_vocab(rc, docs);
    cfg = rc.pretrain_config();
    cfg.model.vocab_size = vocab.size();
    state = init_train_state<T>(cfg);
  }
  cfg.threads = rc.worker_count();
  vocab.save(fs::path(rc.paths.out) / "vocab.txt");
  const auto res = pretrain_loop(
      std::span<const Document>(docs), vocab, cfg, state, rc.paths.out, a.stop_at,
      [](std::size_t step, const LossBreakdown& l, double lr) {
        if (step == 1 || step % 50 == 0) {
          std::fprintf(stderr, "step %zu  total %.4f  lr %.3g\n", step, l.total, lr);
        }
      });
  std::printf("%s\n", res.final_checkpoint.string().c_str());
}

void cmd_pretrain(const PretrainArgs& a, const RunConfig& rc) {
  if (a.resume.empty()) require_file(rc.paths.corpus, "--corpus");
  if (rc.paths.out.empty()) throw UsageError("--out is required");
  fs::create_directories(rc.paths.out);
  announce(rc, rc.paths.out);
  std::string dtype = rc.precision;
  if (!a.resume.empty()) {
    require_file(a.resume, "--resume");
    dtype = read_checkpoint(a.resume).dtype;
    if (rc.paths.corpus.empty()) throw UsageError("--corpus is required when resuming");
  }
  if (dtype == "f64") {
    run_pretrain<double>(a, rc);
  } else {
    run_pretrain<float>(a, rc);
  }
}

struct FinetuneArgs {
  int stage = 1;
  std::string ckpt, examples, stage1_ckpt;
};

template <typename T>
void run_finetune(const FinetuneArgs& a, const RunConfig& rc, const RawCheckpoint& ck) {
  const auto& fc = rc.finetune;
  const unsigned threads = rc.worker_count();
  const auto vocab = checkpoint_vocab(ck);
  const auto passages = read_tsv(rc.paths.passages);
  const auto queries = read_tsv(rc.paths.queries);
  const auto qrels = read_qrels(rc.paths.qrels);
  auto enc = load_for_finetune<T>(ck, fc.tied);

  std::vector<TrainingExample> examples;
  if (!a.examples.empty()) {
    examples = read_examples_jsonl(a.examples, queries);
  } else {
    Bm25Index bm25(passages, fc.bm25_k1, fc.bm25_b, threads);
    auto negs = mine_bm25(bm25, queries, qrels, fc.bm25_depth, fc.per_query);
    if (a.stage == 2) {
      auto miner = load_dual_encoder<T>(read_checkpoint(a.stage1_ckpt));
      negs = merge_negatives(negs, mine_dense(miner, vocab, passages, queries, qrels,
                                              fc.dense_depth, fc.per_query, fc, threads));
    }
    examples = build_examples(queries, qrels, negs);
  }
  write_examples_jsonl(fs::path(rc.paths.out) / "examples.jsonl", examples);
  const auto res = finetune_loop(enc, vocab, examples, passages, qrels, fc, rc.paths.out);
  std::fprintf(stderr, "loss %.4f -> %.4f\n", res.first_loss, res.last_loss);
  std::printf("%s\n", res.checkpoint.string().c_str());
}

void cmd_finetune(const FinetuneArgs& a, const RunConfig& rc) {
  require_file(a.ckpt, "--ckpt");
  require_file(rc.paths.queries, "--queries");
  require_file(rc.paths.passages, "--passages");
  require_file(rc.paths.qrels, "--qrels");
  if (!a.examples.empty()) require_file(a.examples, "--examples");
  if (a.stage == 2 && a.examples.empty()) require_file(a.stage1_ckpt, "--stage1-ckpt");
  if (rc.paths.out.empty()) throw UsageError("--out is required");
  fs::create_directories(rc.paths.out);
  announce(rc, rc.paths.out);
  const auto ck = read_checkpoint(a.ckpt);
  if (ck.dtype == "f64") {
    run_finetune<double>(a, rc, ck);
  } else {
    run_finetune<float>(a, rc, ck);
  }
}

struct MineArgs {
  std::string retriever = "bm25", ckpt, out;
};

template <typename T>
NegativeMap mine_dense_from(const std::string& path, const RunConfig& rc,
                            const std::vector<TsvRecord>& passages,
                            const std::vector<TsvRecord>& queries, const Qrels& qrels,
                            std::vector<std::string>* short_q) {
  const auto ck = read_checkpoint(path);
  auto enc = load_dual_encoder<T>(ck);
  return mine_dense(enc, checkpoint_vocab(ck), passages, queries, qrels, rc.finetune.dense_depth,
                    rc.finetune.per_query, rc.finetune, rc.worker_count(), short_q);
}

void cmd_mine(const MineArgs& a, const RunConfig& rc) {
  require_file(rc.paths.queries, "--queries");
  require_file(rc.paths.passages, "--passages");
  require_file(rc.paths.qrels, "--qrels");
  if (a.out.empty()) throw UsageError("--out is required");
  announce(rc);
  const auto passages = read_tsv(rc.paths.passages);
  const auto queries = read_tsv(rc.paths.queries);
  const auto qrels = read_qrels(rc.paths.qrels);
  std::vector<std::string> short_q;
  NegativeMap negs;
  if (a.retriever == "bm25") {
    Bm25Index bm25(passages, rc.finetune.bm25_k1, rc.finetune.bm25_b, rc.worker_count());
    negs = mine_bm25(bm25, queries, qrels, rc.finetune.bm25_depth, rc.finetune.per_query, &short_q);
  } else {
    require_file(a.ckpt, "--ckpt");
    negs = read_checkpoint(a.ckpt).dtype == "f64"
               ? mine_dense_from<double>(a.ckpt, rc, passages, queries, qrels, &short_q)
               : mine_dense_from<float>(a.ckpt, rc, passages, queries, qrels, &short_q);
  }
  write_examples_jsonl(a.out, build_examples(queries, qrels, negs));
  if (!short_q.empty()) {
    std::cerr << short_q.size() << " queries have fewer than " << rc.finetune.per_query
              << " negatives\n";
  }
}

struct EncodeArgs {
  std::string ckpt, passages, out;
};

template <typename T>
PassageIndex encode_passages(const RawCheckpoint& ck, const std::vector<TsvRecord>& passages,
                             const RunConfig& rc) {
  auto enc = load_dual_encoder<T>(ck);
  return build_index(enc, checkpoint_vocab(ck), passages, rc.finetune.passage_max_len,
                     rc.worker_count());
}

void cmd_encode(const EncodeArgs& a, const RunConfig& rc) {
  require_file(a.ckpt, "--ckpt");
  require_file(a.passages, "--passages");
  if (a.out.empty()) throw UsageError("--out is required");
  announce(rc);
  const auto ck = read_checkpoint(a.ckpt);
  const auto passages = read_tsv(a.passages);
  const auto index = ck.dtype == "f64" ? encode_passages<double>(ck, passages, rc)
                                       : encode_passages<float>(ck, passages, rc);
  index.save(a.out, fs::absolute(a.ckpt).string());
  std::cerr << "indexed " << index.size() << " passages, dim " << index.dim() << "\n";
}

struct SearchArgs {
  std::string index, queries, ckpt, out;
  std::size_t k = 1000;
};

template <typename T>
RetrievalRun search_with(const RawCheckpoint& ck, const PassageIndex& index,
                         const std::vector<TsvRecord>& queries, const SearchArgs& a,
                         const RunConfig& rc) {
  auto enc = load_dual_encoder<T>(ck);
  return search_queries(enc, checkpoint_vocab(ck), index, queries, a.k,
                        rc.finetune.query_max_len, rc.worker_count());
}

void cmd_search(SearchArgs a, const RunConfig& rc) {
  require_file(a.index, "--index");
  require_file(a.queries, "--queries");
  if (a.out.empty()) throw UsageError("--out is required");
  announce(rc);
  std::string stored;
  const auto index = PassageIndex::load(a.index, &stored);
  if (a.ckpt.empty()) a.ckpt = stored;
  require_file(a.ckpt, "--ckpt");
  const auto ck = read_checkpoint(a.ckpt);
  const auto queries = read_tsv(a.queries);
  const auto run = ck.dtype == "f64" ? search_with<double>(ck, index, queries, a, rc)
                                     : search_with<float>(ck, index, queries, a, rc);
  write_run(a.out, run);
}

struct EvalArgs {
  std::string run, qrels, metrics, out;
};

void cmd_eval(const EvalArgs& a, RunConfig rc) {
  require_file(a.run, "--run");
  require_file(a.qrels, "--qrels");
  if (!a.metrics.empty()) rc.eval.metrics = split(a.metrics, ',');
  announce(rc);
  const auto m = evaluate_run(read_run(a.run), read_qrels(a.qrels), rc.eval.metrics);
  print_metrics(m);
  if (!a.out.empty()) {
    json j = json::object();
    for (const auto& [k, v] : m) j[k] = v;
    write_file(a.out, j.dump(2) + "\n");
  }
}

void check_pipeline_paths(const RunConfig& rc) {
  require_file(rc.paths.corpus, "paths.corpus");
  require_file(rc.paths.passages, "paths.passages");
  require_file(rc.paths.queries, "paths.queries");
  require_file(rc.paths.qrels, "paths.qrels");
  if (rc.paths.out.empty()) throw UsageError("paths.out (--out) is required");
}

struct AblateArgs {
  std::string grid, grid_file;
};

int cmd_ablate(const AblateArgs& a, const RunConfig& rc) {
  check_pipeline_paths(rc);
  if (a.grid.empty() == a.grid_file.empty()) throw UsageError("give exactly one of --grid, --grid-file");
  fs::create_directories(rc.paths.out);
  announce(rc, rc.paths.out);
  std::vector<json> grid;
  if (!a.grid.empty()) {
    grid = ablation_grid(a.grid);
  } else {
    const auto j = json::parse(read_file(a.grid_file));
    if (!j.is_array()) throw UsageError("--grid-file must hold a JSON array of override objects");
    grid.assign(j.begin(), j.end());
  }
  const auto rows = run_ablation(rc, grid, &std::cerr);
  std::cout << ablation_csv(rows, rc.eval.metrics);
  for (const auto& r : rows) {
    if (r.status != "ok") return 1;
  }
  return 0;
}

void cmd_pipeline(const RunConfig& rc) {
  check_pipeline_paths(rc);
  fs::create_directories(rc.paths.out);
  announce(rc, rc.paths.out);
  const auto res = run_pipeline(rc, &std::cerr);
  std::printf("[stage1]\n");
  print_metrics(res.stage1);
  std::printf("[stage2]\n");
  print_metrics(res.stage2);
}

struct GradCheckArgs {
  std::size_t vocab = 50, d_model = 16, heads = 2, d_ff = 32, enc = 2, dec = 1, seq = 16, batch = 2,
              coords = 200;
  std::uint64_t seed = 7;
  double tol = 1e-3;
};

int cmd_grad_check(const GradCheckArgs& a) {
  ModelConfig cfg;
  cfg.vocab_size = a.vocab;
  cfg.d_model = a.d_model;
  cfg.n_heads = a.heads;
  cfg.d_ff = a.d_ff;
  cfg.n_enc_layers = a.enc;
  cfg.n_dec_layers = a.dec;
  cfg.max_seq_len = a.seq;
  cfg.dropout = 0.0;
  nn::GradCheckOptions opts;
  opts.coords_per_param = a.coords;
  opts.seed = a.seed;
  std::cerr << "effective config:\n" << to_json(cfg).dump(2) << "\n";
  const auto r = grad_check_model(cfg, a.seed, a.batch, opts);
  std::printf("max relative error %.3e at %s[%zu] (analytic %.6e, numeric %.6e), %zu coordinates\n",
              r.max_rel_error, r.worst_param.c_str(), r.worst_index, r.analytic, r.numeric,
              r.coords_checked);
  return r.max_rel_error < a.tol ? 0 : 1;
}

struct SynthArgs {
  std::string kind = "retrieval", out;
  RetrievalTaskOptions task;
  std::size_t docs = 8, words = 45, sentence_words = 8;
};

void cmd_synth(const SynthArgs& a) {
  if (a.out.empty()) throw UsageError("--out is required");
  if (a.kind == "retrieval") {
    write_retrieval_task(a.out, make_retrieval_task(a.task));
  } else if (a.kind == "overfit") {
    save_documents(fs::path(a.out) / "corpus.jsonl",
                   make_overfit_corpus(a.docs, a.words, a.sentence_words, a.task.seed));
  } else {
    throw UsageError("--kind must be retrieval or overfit");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual masked auto-encoder pre-training and dense retrieval"};
  app.require_subcommand(1);
  std::function<int()> action;

  auto* bp = app.add_subcommand("build-pairs", "sample span pairs for one epoch");
  ConfigFlags bp_flags(bp);
  BuildPairsArgs bp_args;
  bp->add_option("--corpus", bp_args.corpus, "JSONL corpus");
  bp->add_option("--out", bp_args.out, "output pairs JSONL");
  bp->add_option("--epoch", bp_args.epoch, "epoch index");
  bp_flags.add<std::uint64_t>("--seed", "/sampler/epoch_seed", "sampling seed");
  bp_flags.add<std::size_t>("--max-span-len", "/sampler/max_span_len", "token budget per span");
  bp_flags.mixture();
  bp->callback([&] { action = [&] { cmd_build_pairs(bp_args, bp_flags.resolve()); return 0; }; });

  auto* pt = app.add_subcommand("pretrain", "pre-train encoder and decoder");
  ConfigFlags pt_flags(pt);
  PretrainArgs pt_args;
  pt_flags.add<std::string>("--corpus", "/paths/corpus", "JSONL corpus");
  pt_flags.add<std::string>("--out", "/paths/out", "run directory");
  pt_flags.add<std::string>("--vocab", "/tokenizer/vocab", "existing vocabulary file");
  pt_flags.add<std::size_t>("--vocab-size", "/tokenizer/vocab_size", "vocabulary size to train");
  pt_flags.add<std::size_t>("--steps", "/optim/total_steps", "optimizer updates");
  pt_flags.add<std::size_t>("--batch", "/optim/batch_size", "pairs per micro-batch");
  pt_flags.add<std::size_t>("--accum", "/optim/accum_steps", "micro-batches per update");
  pt_flags.add<double>("--lr", "/optim/peak_lr", "peak learning rate");
  pt_flags.add<double>("--warmup", "/optim/warmup_ratio", "warmup fraction of steps");
  pt_flags.add<double>("--enc-mask", "/model/enc_mask_rate", "encoder mask rate");
  pt_flags.add<double>("--dec-mask", "/model/dec_mask_rate", "decoder mask rate");
  pt_flags.add<std::size_t>("--enc-layers", "/model/n_enc_layers", "encoder layers");
  pt_flags.add<std::size_t>("--dec-layers", "/model/n_dec_layers", "decoder layers");
  pt_flags.add<std::size_t>("--max-span-len", "/sampler/max_span_len", "token budget per span");
  pt_flags.add<std::size_t>("--checkpoint-every", "/pretrain/checkpoint_every", "save every N steps");
  pt_flags.add<std::string>("--decoder-init", "/pretrain/decoder_init", "random, first, uniform or last");
  pt_flags.add<std::uint64_t>("--seed", "/seed", "global seed");
  pt_flags.mixture();
  pt->add_option("--resume", pt_args.resume, "continue from a pre-training checkpoint");
  pt->add_option("--stop-at", pt_args.stop_at, "stop after this step");
  pt->callback([&] { action = [&] { cmd_pretrain(pt_args, pt_flags.resolve()); return 0; }; });

  auto* ft = app.add_subcommand("finetune", "contrastive dual-encoder training");
  ConfigFlags ft_flags(ft);
  FinetuneArgs ft_args;
  ft->add_option("--stage", ft_args.stage, "1: BM25 negatives, 2: BM25 + dense negatives")
      ->check(CLI::IsMember({1, 2}));
  ft->add_option("--ckpt", ft_args.ckpt, "initial weights");
  ft->add_option("--examples", ft_args.examples, "training examples JSONL (skips mining)");
  ft->add_option("--stage1-ckpt", ft_args.stage1_ckpt, "stage-1 model used for dense mining");
  ft_flags.add<std::string>("--queries", "/paths/queries", "queries TSV");
  ft_flags.add<std::string>("--passages", "/paths/passages", "passages TSV");
  ft_flags.add<std::string>("--qrels", "/paths/qrels", "qrels TSV");
  ft_flags.add<std::string>("--out", "/paths/out", "run directory");
  ft_flags.add<std::size_t>("--steps", "/finetune/optim/total_steps", "optimizer updates");
  ft_flags.add<std::size_t>("--batch", "/finetune/optim/batch_size", "queries per batch");
  ft_flags.add<double>("--lr", "/finetune/optim/peak_lr", "peak learning rate");
  ft_flags.add<std::size_t>("--group-negatives", "/finetune/group_negatives", "negatives per query");
  ft_flags.add<bool>("--in-batch", "/finetune/in_batch", "share passages across the batch");
  ft_flags.add<bool>("--tied", "/finetune/tied", "one encoder for queries and passages");
  ft_flags.add<std::uint64_t>("--seed", "/seed", "global seed");
  ft->callback([&] { action = [&] { cmd_finetune(ft_args, ft_flags.resolve()); return 0; }; });

  auto* mn = app.add_subcommand("mine", "mine hard negatives into training examples");
  ConfigFlags mn_flags(mn);
  MineArgs mn_args;
  mn->add_option("--retriever", mn_args.retriever, "bm25 or dense")
      ->check(CLI::IsMember({"bm25", "dense"}));
  mn->add_option("--ckpt", mn_args.ckpt, "dense retriever checkpoint");
  mn->add_option("--out", mn_args.out, "training examples JSONL");
  mn_flags.add<std::string>("--queries", "/paths/queries", "queries TSV");
  mn_flags.add<std::string>("--passages", "/paths/passages", "passages TSV");
  mn_flags.add<std::string>("--qrels", "/paths/qrels", "qrels TSV");
  std::size_t mn_depth = 200;
  auto* depth = mn->add_option("--depth", mn_depth, "retrieval depth");
  mn_flags.add<std::size_t>("--per-query", "/finetune/per_query", "negatives kept per query");
  mn->callback([&] {
    action = [&] {
      auto rc = mn_flags.resolve();
      if (depth->count()) {
        rc.finetune.bm25_depth = mn_depth;
        rc.finetune.dense_depth = mn_depth;
      }
      cmd_mine(mn_args, rc);
      return 0;
    };
  });

  auto* en = app.add_subcommand("encode", "embed passages into an index file");
  ConfigFlags en_flags(en);
  EncodeArgs en_args;
  en->add_option("--ckpt", en_args.ckpt, "encoder checkpoint");
  en->add_option("--passages", en_args.passages, "passages TSV");
  en->add_option("--out", en_args.out, "index file");
  en->callback([&] { action = [&] { cmd_encode(en_args, en_flags.resolve()); return 0; }; });

  auto* se = app.add_subcommand("search", "exact top-k search over an index");
  ConfigFlags se_flags(se);
  SearchArgs se_args;
  se->add_option("--index", se_args.index, "index file");
  se->add_option("--queries", se_args.queries, "queries TSV");
  se->add_option("--ckpt", se_args.ckpt, "query encoder (default: the one that built the index)");
  se->add_option("--k", se_args.k, "hits per query")->check(CLI::PositiveNumber);
  se->add_option("--out", se_args.out, "TREC run file");
  se->callback([&] { action = [&] { cmd_search(se_args, se_flags.resolve()); return 0; }; });

  auto* ev = app.add_subcommand("eval", "score a run against qrels");
  ConfigFlags ev_flags(ev);
  EvalArgs ev_args;
  ev->add_option("--run", ev_args.run, "TREC run file");
  ev->add_option("--qrels", ev_args.qrels, "qrels TSV");
  ev->add_option("--metrics", ev_args.metrics, "comma-separated, e.g. mrr@10,recall@50");
  ev->add_option("--out", ev_args.out, "also write metrics as JSON");
  ev->callback([&] { action = [&] { cmd_eval(ev_args, ev_flags.resolve()); return 0; }; });

  auto* pl = app.add_subcommand("pipeline", "pretrain, two fine-tuning stages and evaluation");
  ConfigFlags pl_flags(pl);
  pl_flags.add<std::string>("--out", "/paths/out", "run directory");
  pl_flags.add<std::uint64_t>("--seed", "/seed", "global seed");
  pl->callback([&] { action = [&] { cmd_pipeline(pl_flags.resolve()); return 0; }; });

  auto* ab = app.add_subcommand("ablate", "run the pipeline over a grid of config overrides");
  ConfigFlags ab_flags(ab);
  AblateArgs ab_args;
  ab->add_option("--grid", ab_args.grid, "mask-rate, decoder-layers or sampling");
  ab->add_option("--grid-file", ab_args.grid_file, "JSON array of override objects");
  ab_flags.add<std::string>("--out", "/paths/out", "run directory");
  ab_flags.add<std::uint64_t>("--seed", "/seed", "global seed");
  ab->callback([&] { action = [&] { return cmd_ablate(ab_args, ab_flags.resolve()); }; });

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the pre-training loss");
  GradCheckArgs gc_args;
  gc->add_option("--vocab-size", gc_args.vocab);
  gc->add_option("--d-model", gc_args.d_model);
  gc->add_option("--heads", gc_args.heads);
  gc->add_option("--d-ff", gc_args.d_ff);
  gc->add_option("--enc-layers", gc_args.enc);
  gc->add_option("--dec-layers", gc_args.dec);
  gc->add_option("--seq", gc_args.seq);
  gc->add_option("--batch", gc_args.batch);
  gc->add_option("--coords", gc_args.coords, "coordinates per parameter");
  gc->add_option("--seed", gc_args.seed);
  gc->add_option("--tol", gc_args.tol, "fail above this relative error");
  gc->callback([&] { action = [&] { return cmd_grad_check(gc_args); }; });

  auto* sy = app.add_subcommand("synth", "write a synthetic corpus");
  SynthArgs sy_args;
  sy->add_option("--kind", sy_args.kind, "retrieval or overfit");
  sy->add_option("--out", sy_args.out, "output directory");
  sy->add_option("--passages", sy_args.task.n_passages);
  sy->add_option("--docs", sy_args.docs);
  sy->add_option("--words", sy_args.words);
  sy->add_option("--seed", sy_args.task.seed);
  sy->callback([&] { action = [&] { cmd_synth(sy_args); return 0; }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
