#include "doctest.h"

#include <cmath>

#include "cotmae/pretrain.hpp"
#include "cotmae/synthetic.hpp"
#include "test_util.hpp"

using namespace cotmae;

namespace {

PretrainConfig overfit_config(const Vocabulary& vocab, std::size_t steps) {
  PretrainConfig c;
  c.model.vocab_size = vocab.size();
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.model.n_enc_layers = 2;
  c.model.n_dec_layers = 1;
  c.model.max_seq_len = 16;
  c.model.dropout = 0.0;
  c.sampler.max_span_len = 16;
  c.optim.peak_lr = 2e-2;
  c.optim.total_steps = steps;
  c.optim.batch_size = 8;
  c.optim.weight_decay = 0.0;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  OptimConfig o;
  o.peak_lr = 1e-4;
  o.total_steps = 1000;
  o.warmup_ratio = 0.1;
  CHECK(lr_at(50, o) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(100, o) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(550, o) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at(1000, o) == 0.0);
  o.warmup_ratio = 0.0;
  CHECK(lr_at(1, o) == doctest::Approx(1e-4 * 999.0 / 1000.0));
}

TEST_CASE("AdamW update rules") {
  OptimConfig o;
  o.weight_decay = 0.0;
  nn::Parameter<double> p("w", nn::Tensor<double>({1}, {0.5}));
  std::vector<nn::Parameter<double>*> params{&p};
  AdamState<double> st(params);

  adamw_step(params, st, 1e-3, o);
  CHECK(p.value[0] == 0.5);

  p.grad[0] = 1.0;
  AdamState<double> st2(params);
  adamw_step(params, st2, 1e-3, o);
  CHECK(0.5 - p.value[0] == doctest::Approx(0.0009999999900000003).epsilon(1e-12));

  o.weight_decay = 0.1;
  nn::Parameter<double> q("q", nn::Tensor<double>({2}, {2.0, -4.0}));
  std::vector<nn::Parameter<double>*> qs{&q};
  AdamState<double> st3(qs);
  adamw_step(qs, st3, 1e-2, o);
  CHECK(q.value[0] == doctest::Approx(2.0 * (1 - 1e-3)).epsilon(1e-14));
  CHECK(q.value[1] == doctest::Approx(-4.0 * (1 - 1e-3)).epsilon(1e-14));

  nn::Parameter<double> nodecay("b", nn::Tensor<double>({1}, {2.0}), false);
  std::vector<nn::Parameter<double>*> ns{&nodecay};
  AdamState<double> st4(ns);
  adamw_step(ns, st4, 1e-2, o);
  CHECK(nodecay.value[0] == 2.0);

  q.grad[1] = std::nan("");
  CHECK_THROWS_WITH(adamw_step(qs, st3, 1e-2, o), doctest::Contains("'q'"));
}

TEST_CASE("gradient clipping") {
  nn::Parameter<double> a("a", nn::Tensor<double>({2}));
  nn::Parameter<double> b("b", nn::Tensor<double>({1}));
  a.grad[0] = 3.0;
  a.grad[1] = 0.0;
  b.grad[0] = 4.0;
  std::vector<nn::Parameter<double>*> ps{&a, &b};
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(5.0));
  CHECK(b.grad[0] == 4.0);
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
  CHECK(b.grad[0] == doctest::Approx(0.8));
}

TEST_CASE("pair feeder addresses any step directly") {
  const auto docs = make_overfit_corpus(12, 45, 8, 1);
  const auto vocab = train_vocab(docs, 50);
  SamplerConfig s;
  s.max_span_len = 16;
  PairFeeder f1(docs, s, 9, vocab, 16), f2(docs, s, 9, vocab, 16);
  std::vector<TokenSequence> a1, b1, a2, b2, x, y;
  f1.fetch(0, 30, a1, b1);
  f2.fetch(17, 13, a2, b2);
  CHECK(std::vector<TokenSequence>(a1.begin() + 17, a1.end()) == a2);
  CHECK(std::vector<TokenSequence>(b1.begin() + 17, b1.end()) == b2);
  f2.fetch(0, 12, x, y);
  f2.fetch(12, 12, a2, b2);
  CHECK(x != a2);
  CHECK(f1.pairs_per_epoch() == 12);
}

TEST_CASE("checkpoints round-trip bitwise and fail loudly") {
  test::TempDir dir("ckpt");
  const auto docs = make_overfit_corpus(8, 45, 8, 3);
  const auto vocab = train_vocab(docs, 50);
  auto cfg = overfit_config(vocab, 5);
  auto st = init_train_state<double>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, st, dir.path());

  save_train_state(dir / "a.ckpt", st, cfg, vocab);
  auto loaded = load_train_state<double>(dir / "a.ckpt");
  save_train_state(dir / "b.ckpt", loaded.state, loaded.cfg, loaded.vocab);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  CHECK(loaded.state.step == 5);
  CHECK(loaded.vocab == vocab);
  CHECK(loaded.cfg.model == cfg.model);

  auto bytes = read_file(dir / "a.ckpt");
  bytes[0] = 'X';
  write_file(dir / "bad.ckpt", bytes);
  CHECK_THROWS_WITH(read_checkpoint(dir / "bad.ckpt"), doctest::Contains("bad magic"));

  write_file(dir / "short.ckpt", read_file(dir / "a.ckpt").substr(0, 200));
  CHECK_THROWS_WITH(read_checkpoint(dir / "short.ckpt"), doctest::Contains("truncated"));

  const auto ck = read_checkpoint(dir / "a.ckpt");
  auto other = cfg.model;
  other.d_model = 32;
  ModelWeights<double> w(other);
  CHECK_THROWS_WITH(ck.load("enc.emb.tok", w.encoder.tok_emb.value),
                    doctest::Contains("shape mismatch for tensor 'enc.emb.tok'"));
  nn::Tensor<float> as_float({vocab.size(), 16});
  ck.load("enc.emb.tok", as_float);
  CHECK(as_float[3] == static_cast<float>(st.weights.encoder.tok_emb.value[3]));
}

TEST_CASE("resume matches an uninterrupted run bit for bit") {
  test::TempDir dir("resume");
  const auto docs = make_overfit_corpus(8, 45, 8, 3);
  const auto vocab = train_vocab(docs, 50);
  auto cfg = overfit_config(vocab, 20);
  cfg.model.dropout = 0.1;
  cfg.optim.batch_size = 3;
  cfg.optim.accum_steps = 2;
  cfg.checkpoint_every = 5;

  auto full = init_train_state<double>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, full, dir / "full");

  auto part = init_train_state<double>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, part, dir / "part", 10);
  auto loaded = load_train_state<double>(checkpoint_path(dir / "part", 10));
  CHECK(loaded.state.step == 10);
  pretrain_loop(std::span<const Document>(docs), vocab, loaded.cfg, loaded.state, dir / "part");

  CHECK(read_file(dir / "full" / "metrics.csv") == read_file(dir / "part" / "metrics.csv"));
  for (std::size_t i = 0; i < full.weights.parameters().size(); ++i) {
    CHECK(full.weights.parameters()[i]->value == loaded.state.weights.parameters()[i]->value);
  }
  CHECK(std::filesystem::exists(checkpoint_path(dir / "full", 15)));
  CHECK(read_lines(dir / "full" / "metrics.csv").front() == kMetricsHeader);
}

TEST_CASE("equal seeds give identical metrics; different seeds do not") {
  test::TempDir dir("det");
  const auto docs = make_overfit_corpus(8, 45, 8, 3);
  const auto vocab = train_vocab(docs, 50);
  auto cfg = overfit_config(vocab, 8);
  auto s1 = init_train_state<float>(cfg);
  auto s2 = init_train_state<float>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, s1, dir / "a");
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, s2, dir / "b");
  CHECK(read_file(dir / "a" / "metrics.csv") == read_file(dir / "b" / "metrics.csv"));
  cfg.seed = 4;
  auto s3 = init_train_state<float>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, s3, dir / "c");
  CHECK(read_file(dir / "a" / "metrics.csv") != read_file(dir / "c" / "metrics.csv"));
}

TEST_CASE("trained toy model prefers the true context over a zero vector") {
  test::TempDir dir("ctx");
  const auto docs = make_overfit_corpus(8, 45, 8, 3);
  const auto vocab = train_vocab(docs, 50);
  auto cfg = overfit_config(vocab, 300);
  auto st = init_train_state<double>(cfg);
  pretrain_loop(std::span<const Document>(docs), vocab, cfg, st, dir.path());

  PairFeeder feeder(docs, cfg.sampler, cfg.seed, vocab, 16);
  std::vector<TokenSequence> a, b;
  feeder.fetch(0, 8, a, b);
  Rng rng(5);
  double with_true = 0.0, with_zero = 0.0;
  for (int d = 0; d < 20; ++d) {
    const auto m = draw_pair_masks(a, b, cfg.model, rng);
    nn::Tape<double> t(false);
    auto ctx = encode(t, st.weights.encoder, make_batch(std::span<const MaskedSpan>(m.enc_a))).context;
    auto zero = t.constant(nn::Tensor<double>(ctx.value().shape()));
    const auto db = make_batch(std::span<const MaskedSpan>(m.dec_b));
    with_true += decoder_loss(t, st.weights, ctx, db).value().item();
    with_zero += decoder_loss(t, st.weights, zero, db).value().item();
  }
  CHECK(with_true < with_zero);
}

TEST_CASE("optimizer config validation") {
  OptimConfig o;
  o.warmup_ratio = 1.5;
  CHECK_THROWS(o.validate());
  o = OptimConfig{};
  o.total_steps = 0;
  CHECK_THROWS(o.validate());
  o = OptimConfig{};
  o.beta2 = 1.0;
  CHECK_THROWS(o.validate());
}
