#include "doctest.h"

#include <cmath>
#include <set>

#include "cotmae/model.hpp"

using namespace cotmae;

namespace {

ModelConfig tiny(std::size_t vocab = 50) {
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
  while (s.size() < len) s.push_back(static_cast<TokenId>(special::kCount + rng.below(vocab - special::kCount)));
  return s;
}

}  // namespace

TEST_CASE("mask counts follow the rounding rule") {
  CHECK(mask_count(21, 0.30) == 6);
  CHECK(mask_count(21, 0.45) == 9);
  CHECK(mask_count(21, 0.0) == 0);
  CHECK(mask_count(1, 0.5) == 0);

  Rng rng(1);
  const auto seq = random_seq(21, 50, rng);
  const auto none = apply_mask(seq, 0.0, rng);
  CHECK(none.input_ids == seq);
  for (int l : none.labels) CHECK(l == nn::kIgnoreLabel);

  std::set<std::vector<std::size_t>> distinct;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const auto m = apply_mask(seq, 0.45, r);
    CHECK(m.mask_positions.size() == 9);
    distinct.insert(m.mask_positions);
  }
  CHECK(distinct.size() > 1);
}

TEST_CASE("masked spans carry labels only at masked positions") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto seq = random_seq(2 + rng.below(30), 60, rng);
    const auto m = apply_mask(seq, 0.3, rng);
    REQUIRE(m.input_ids.size() == seq.size());
    CHECK(m.input_ids[0] == special::kCls);
    CHECK(m.labels[0] == nn::kIgnoreLabel);
    std::set<std::size_t> pos(m.mask_positions.begin(), m.mask_positions.end());
    CHECK(pos.size() == m.mask_positions.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (pos.count(i)) {
        CHECK(m.input_ids[i] == special::kMask);
        CHECK(m.labels[i] == seq[i]);
      } else {
        CHECK(m.input_ids[i] == seq[i]);
        CHECK(m.labels[i] == nn::kIgnoreLabel);
      }
    }
  }
}

TEST_CASE("80/10/10 corruption keeps labels and never writes specials") {
  Rng rng(3);
  std::size_t masked = 0, kept = 0, replaced = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto seq = random_seq(21, 40, rng);
    const auto m = apply_mask(seq, 0.3, rng, true, 40);
    for (auto p : m.mask_positions) {
      CHECK(m.labels[p] == seq[p]);
      if (m.input_ids[p] == special::kMask) {
        ++masked;
      } else if (m.input_ids[p] == seq[p]) {
        ++kept;
      } else {
        CHECK(m.input_ids[p] >= special::kCount);
        ++replaced;
      }
    }
  }
  const double n = static_cast<double>(masked + kept + replaced);
  CHECK(masked / n == doctest::Approx(0.8).epsilon(0.03));
  CHECK((kept + replaced) / n == doctest::Approx(0.2).epsilon(0.1));
  Rng r(4);
  CHECK_THROWS(apply_mask(random_seq(5, 40, r), 0.3, r, true, 0));
}

TEST_CASE("make_batch pads to the longest sequence") {
  const std::vector<TokenSequence> seqs{{2, 7, 8}, {2, 9}};
  const auto b = make_batch(std::span<const TokenSequence>(seqs));
  CHECK(b.batch == 2);
  CHECK(b.seq_len == 3);
  CHECK(b.ids == std::vector<TokenId>{2, 7, 8, 2, 9, special::kPad});
  CHECK(b.valid == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0});
}

TEST_CASE("decoder initialization layers") {
  CHECK(decoder_init_layers(DecoderInit::uniform, 12, 2) == std::vector<std::size_t>{5, 11});
  CHECK(decoder_init_layers(DecoderInit::first, 12, 2) == std::vector<std::size_t>{0, 1});
  CHECK(decoder_init_layers(DecoderInit::last, 12, 2) == std::vector<std::size_t>{10, 11});
  CHECK(decoder_init_from_string("uniform") == DecoderInit::uniform);
  CHECK_THROWS(decoder_init_from_string("middle"));

  auto cfg = tiny();
  cfg.n_enc_layers = 3;
  cfg.n_dec_layers = 1;
  Rng rng(5);
  auto w = init_model<double>(cfg, rng, DecoderInit::last);
  CHECK(w.decoder[0].wq.value == w.encoder.layers[2].wq.value);
  CHECK(w.decoder[0].wq.name == "dec.layer.0.attn.wq");
}

TEST_CASE("parameter naming, decay flags and init statistics") {
  Rng rng(6);
  auto w = init_model<double>(tiny(), rng);
  std::set<std::string> names;
  for (auto* p : w.parameters()) {
    CHECK(names.insert(p->name).second);
    const bool is_gain = p->name.size() > 2 && p->name.substr(p->name.size() - 2) == ".g";
    if (p->value.rank() >= 2) {
      CHECK(p->decay);
      for (auto v : p->value.values()) CHECK(std::abs(v) <= 0.04 + 1e-12);
    } else {
      CHECK_FALSE(p->decay);
      for (auto v : p->value.values()) CHECK(v == (is_gain ? 1.0 : 0.0));
    }
  }
  CHECK(names.count("enc.emb.tok"));
  CHECK(names.count("head.out.b"));
  CHECK(names.count("dec.layer.0.ffn.w1"));
}

TEST_CASE("untrained losses sit near ln V") {
  auto cfg = tiny(100);
  cfg.max_seq_len = 32;
  Rng rng(7);
  auto w = init_model<double>(cfg, rng);
  std::vector<TokenSequence> a, b;
  for (int i = 0; i < 8; ++i) {
    a.push_back(random_seq(24, 100, rng));
    b.push_back(random_seq(20, 100, rng));
  }
  const auto masks = draw_pair_masks(a, b, cfg, rng);
  LossBreakdown l = cotmae_loss(w, masks, nullptr, false);
  const double ln_v = std::log(100.0);
  CHECK(l.l_smlm_a >= 4.0);
  CHECK(l.l_smlm_a <= 5.2);
  CHECK(std::abs(l.l_cmlm_ab - ln_v) < 0.6);
  CHECK(std::abs(l.l_cmlm_ba - ln_v) < 0.6);
}

TEST_CASE("encoder gradient check") {
  auto cfg = tiny();
  Rng rng(8);
  auto w = init_model<double>(cfg, rng);
  std::vector<MaskedSpan> spans;
  for (int i = 0; i < 2; ++i) spans.push_back(apply_mask(random_seq(12 - 3 * i, 50, rng), 0.3, rng));
  const auto batch = make_batch(std::span<const MaskedSpan>(spans));
  std::vector<nn::Parameter<double>*> params = w.encoder.parameters();
  for (auto* p : {&w.head_w, &w.head_b, &w.head_ln_g, &w.head_ln_b, &w.head_out_b}) params.push_back(p);
  const auto r = nn::grad_check(
      [&](nn::Tape<double>& t) {
        auto out = encode(t, w.encoder, batch);
        return mlm_loss(t, w, out.hidden.back(), std::span<const int>(batch.labels));
      },
      params);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("context-MLM loss reaches the encoder") {
  Rng rng(9);
  auto w = init_model<double>(tiny(), rng);
  std::vector<MaskedSpan> enc_in, dec_in;
  for (int i = 0; i < 2; ++i) {
    enc_in.push_back(apply_mask(random_seq(10, 50, rng), 0.3, rng));
    dec_in.push_back(apply_mask(random_seq(12, 50, rng), 0.45, rng));
  }
  nn::Tape<double> t;
  auto ctx = encode(t, w.encoder, make_batch(std::span<const MaskedSpan>(enc_in))).context;
  t.backward(decoder_loss(t, w, ctx, make_batch(std::span<const MaskedSpan>(dec_in))));
  double norm = 0.0;
  for (auto* p : w.encoder.layers[0].parameters()) {
    for (auto g : p->grad.values()) norm += g * g;
  }
  CHECK(norm > 0.0);
}

TEST_CASE("pair loss decomposition and symmetry") {
  const auto cfg = tiny();
  Rng rng(10);
  auto w = init_model<double>(cfg, rng);
  std::vector<TokenSequence> a, b;
  for (int i = 0; i < 3; ++i) {
    a.push_back(random_seq(9 + i, 50, rng));
    b.push_back(random_seq(14 - i, 50, rng));
  }
  const auto m = draw_pair_masks(a, b, cfg, rng);
  const auto l = cotmae_loss(w, m, nullptr, false);
  CHECK(std::abs(l.total - (l.l_smlm_a + l.l_cmlm_ab + l.l_smlm_b + l.l_cmlm_ba)) < 1e-6);

  // each term recomputed on its own
  nn::Tape<double> t(false);
  auto ea = make_batch(std::span<const MaskedSpan>(m.enc_a));
  auto eb = make_batch(std::span<const MaskedSpan>(m.enc_b));
  auto oa = encode(t, w.encoder, ea);
  auto ob = encode(t, w.encoder, eb);
  CHECK(std::abs(mlm_loss(t, w, oa.hidden.back(), std::span<const int>(ea.labels)).value().item() - l.l_smlm_a) < 1e-6);
  CHECK(std::abs(mlm_loss(t, w, ob.hidden.back(), std::span<const int>(eb.labels)).value().item() - l.l_smlm_b) < 1e-6);
  CHECK(std::abs(decoder_loss(t, w, oa.context, make_batch(std::span<const MaskedSpan>(m.dec_b))).value().item() -
                 l.l_cmlm_ab) < 1e-6);
  CHECK(std::abs(decoder_loss(t, w, ob.context, make_batch(std::span<const MaskedSpan>(m.dec_a))).value().item() -
                 l.l_cmlm_ba) < 1e-6);

  const PairMasks swapped{m.enc_b, m.dec_a, m.enc_a, m.dec_b};
  const auto s = cotmae_loss(w, swapped, nullptr, false);
  CHECK(std::abs(s.l_smlm_a - l.l_smlm_b) < 1e-6);
  CHECK(std::abs(s.l_cmlm_ab - l.l_cmlm_ba) < 1e-6);
  CHECK(std::abs(s.total - l.total) < 1e-6);

  // A == B with replayed masks
  Rng r1(77), r2(78);
  std::vector<MaskedSpan> enc, dec;
  for (const auto& seq : a) {
    enc.push_back(apply_mask(seq, cfg.enc_mask_rate, r1));
    dec.push_back(apply_mask(seq, cfg.dec_mask_rate, r2));
  }
  const auto same = cotmae_loss(w, PairMasks{enc, dec, enc, dec}, nullptr, false);
  CHECK(std::abs(same.l_smlm_a - same.l_smlm_b) < 1e-6);
  CHECK(std::abs(same.l_cmlm_ab - same.l_cmlm_ba) < 1e-6);
}

TEST_CASE("zero-mask batches are redrawn once, then rejected") {
  auto cfg = tiny();
  Rng rng(11);
  // two tokens: mask_count(2, 0.3) rounds to 0 every time
  const std::vector<TokenSequence> a{{special::kCls, 7}}, b{{special::kCls, 8}};
  CHECK_THROWS(draw_pair_masks(a, b, cfg, rng));
  const std::vector<TokenSequence> a2{{special::kCls, 7}, random_seq(12, 50, rng)};
  const std::vector<TokenSequence> b2{random_seq(12, 50, rng), {special::kCls, 8}};
  const auto m = draw_pair_masks(a2, b2, cfg, rng);
  CHECK(m.enc_a[0].mask_positions.empty());
  CHECK_FALSE(m.enc_a[1].mask_positions.empty());
}

TEST_CASE("float and double paths agree") {
  const auto cfg = tiny();
  Rng r1(12), r2(12);
  auto wd = init_model<double>(cfg, r1);
  auto wf = init_model<float>(cfg, r2);
  std::vector<TokenSequence> a{random_seq(10, 50, r1)}, b{random_seq(11, 50, r1)};
  Rng m1(5);
  const auto masks = draw_pair_masks(a, b, cfg, m1);
  const auto ld = cotmae_loss(wd, masks, nullptr, false);
  const auto lf = cotmae_loss(wf, masks, nullptr, false);
  CHECK(std::abs(ld.total - lf.total) < 1e-4);
}

TEST_CASE("model config validation") {
  auto cfg = tiny();
  cfg.n_heads = 3;
  CHECK_THROWS(cfg.validate());
  cfg = tiny();
  cfg.enc_mask_rate = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg = tiny();
  cfg.vocab_size = 0;
  CHECK_THROWS(cfg.validate());
}
