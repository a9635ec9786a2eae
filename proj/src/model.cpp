#include "cotmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cotmae {

using nn::Parameter;
using nn::Tape;
using nn::Tensor;
using nn::Var;

std::string_view to_string(DecoderInit d) {
  switch (d) {
    case DecoderInit::random: return "random";
    case DecoderInit::first: return "first";
    case DecoderInit::uniform: return "uniform";
    case DecoderInit::last: return "last";
  }
  return "random";
}

DecoderInit decoder_init_from_string(std::string_view s) {
  if (s == "random") return DecoderInit::random;
  if (s == "first") return DecoderInit::first;
  if (s == "uniform") return DecoderInit::uniform;
  if (s == "last") return DecoderInit::last;
  throw std::invalid_argument("unknown decoder init '" + std::string(s) +
                              "' (expected random, first, uniform or last)");
}

std::vector<std::size_t> decoder_init_layers(DecoderInit init, std::size_t n_enc,
                                             std::size_t n_dec) {
  if (init == DecoderInit::random) return {};
  if (n_dec > n_enc) {
    throw std::invalid_argument("decoder init from encoder needs n_dec_layers <= n_enc_layers");
  }
  std::vector<std::size_t> idx(n_dec);
  for (std::size_t k = 0; k < n_dec; ++k) {
    switch (init) {
      case DecoderInit::first: idx[k] = k; break;
      case DecoderInit::last: idx[k] = n_enc - n_dec + k; break;
      case DecoderInit::uniform: idx[k] = (k + 1) * n_enc / n_dec - 1; break;
      case DecoderInit::random: break;
    }
  }
  return idx;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) {
    fail("vocab_size must exceed the 5 special tokens");
  }
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail("d_model must be a positive multiple of n_heads");
  }
  if (d_ff == 0) fail("d_ff must be positive");
  if (n_enc_layers == 0) fail("n_enc_layers must be >= 1");
  if (n_dec_layers == 0) fail("n_dec_layers must be >= 1");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (!(enc_mask_rate >= 0.0 && enc_mask_rate < 1.0)) fail("enc_mask_rate must be in [0, 1)");
  if (!(dec_mask_rate >= 0.0 && dec_mask_rate < 1.0)) fail("dec_mask_rate must be in [0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// masking and batching

std::size_t mask_count(std::size_t len, double rate) {
  if (len < 2) return 0;
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(len - 1)));
}

MaskedSpan apply_mask(const TokenSequence& seq, double rate, Rng& rng, bool bert_corruption,
                      std::size_t vocab_size) {
  if (seq.size() < 2) throw std::invalid_argument("apply_mask needs at least 2 tokens");
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("mask rate must be in [0, 1)");
  if (bert_corruption && vocab_size <= static_cast<std::size_t>(special::kCount)) {
    throw std::invalid_argument("bert corruption needs a vocabulary beyond the specials");
  }
  MaskedSpan out;
  out.input_ids = seq;
  out.labels.assign(seq.size(), nn::kIgnoreLabel);

  const std::size_t maskable = seq.size() - 1;
  const std::size_t count = mask_count(seq.size(), rate);
  std::vector<std::size_t> pos(maskable);
  std::iota(pos.begin(), pos.end(), std::size_t{1});
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pos[i], pos[i + rng.below(maskable - i)]);
  }
  pos.resize(count);
  std::sort(pos.begin(), pos.end());

  for (auto p : pos) {
    out.labels[p] = seq[p];
    if (!bert_corruption) {
      out.input_ids[p] = special::kMask;
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.8) {
      out.input_ids[p] = special::kMask;
    } else if (u < 0.9) {
      const auto span = vocab_size - static_cast<std::size_t>(special::kCount);
      out.input_ids[p] = static_cast<TokenId>(special::kCount + rng.below(span));
    }
  }
  out.mask_positions = std::move(pos);
  return out;
}

namespace {

template <typename Seq, typename Ids, typename Labels>
TokenBatch pack(std::span<const Seq> items, Ids ids_of, Labels labels_of) {
  if (items.empty()) throw std::invalid_argument("empty batch");
  TokenBatch b;
  b.batch = items.size();
  for (const auto& s : items) {
    if (ids_of(s).empty()) throw std::invalid_argument("empty sequence in batch");
    b.seq_len = std::max(b.seq_len, ids_of(s).size());
  }
  const std::size_t n = b.batch * b.seq_len;
  b.ids.assign(n, special::kPad);
  b.valid.assign(n, 0);
  b.labels.assign(n, nn::kIgnoreLabel);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& ids = ids_of(items[i]);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      b.ids[i * b.seq_len + j] = ids[j];
      b.valid[i * b.seq_len + j] = 1;
      b.labels[i * b.seq_len + j] = labels_of(items[i], j);
    }
  }
  return b;
}

}  // namespace

TokenBatch make_batch(std::span<const MaskedSpan> spans) {
  return pack(
      spans, [](const MaskedSpan& m) -> const TokenSequence& { return m.input_ids; },
      [](const MaskedSpan& m, std::size_t j) { return m.labels[j]; });
}

TokenBatch make_batch(std::span<const TokenSequence> seqs) {
  return pack(
      seqs, [](const TokenSequence& s) -> const TokenSequence& { return s; },
      [](const TokenSequence&, std::size_t) { return nn::kIgnoreLabel; });
}

// ---------------------------------------------------------------------------
// weights

template <typename T>
LayerWeights<T>::LayerWeights(const std::string& p, std::size_t d, std::size_t f)
    : wq(p + "attn.wq", Tensor<T>({d, d})),
      bq(p + "attn.bq", Tensor<T>({d}), false),
      wk(p + "attn.wk", Tensor<T>({d, d})),
      bk(p + "attn.bk", Tensor<T>({d}), false),
      wv(p + "attn.wv", Tensor<T>({d, d})),
      bv(p + "attn.bv", Tensor<T>({d}), false),
      wo(p + "attn.wo", Tensor<T>({d, d})),
      bo(p + "attn.bo", Tensor<T>({d}), false),
      ln1_g(p + "ln1.g", Tensor<T>({d}, T(1)), false),
      ln1_b(p + "ln1.b", Tensor<T>({d}), false),
      w1(p + "ffn.w1", Tensor<T>({d, f})),
      b1(p + "ffn.b1", Tensor<T>({f}), false),
      w2(p + "ffn.w2", Tensor<T>({f, d})),
      b2(p + "ffn.b2", Tensor<T>({d}), false),
      ln2_g(p + "ln2.g", Tensor<T>({d}, T(1)), false),
      ln2_b(p + "ln2.b", Tensor<T>({d}), false) {}

template <typename T>
std::vector<Parameter<T>*> LayerWeights<T>::parameters() {
  return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b,
          &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
}

template <typename T>
void LayerWeights<T>::copy_values_from(const LayerWeights& other) {
  auto dst = parameters();
  auto src = const_cast<LayerWeights&>(other).parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->value.shape() != src[i]->value.shape()) {
      throw std::invalid_argument("layer copy shape mismatch at " + dst[i]->name);
    }
    dst[i]->value = src[i]->value;
  }
}

template <typename T>
EncoderWeights<T>::EncoderWeights(const ModelConfig& c, const std::string& prefix)
    : cfg(c),
      tok_emb(prefix + "emb.tok", Tensor<T>({c.vocab_size, c.d_model})),
      pos_emb(prefix + "emb.pos", Tensor<T>({c.max_seq_len, c.d_model})),
      emb_ln_g(prefix + "emb.ln.g", Tensor<T>({c.d_model}, T(1)), false),
      emb_ln_b(prefix + "emb.ln.b", Tensor<T>({c.d_model}), false) {
  c.validate();
  layers.reserve(c.n_enc_layers);
  for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
    layers.emplace_back(prefix + "layer." + std::to_string(i) + ".", c.d_model, c.d_ff);
  }
}

template <typename T>
std::vector<Parameter<T>*> EncoderWeights<T>::parameters() {
  std::vector<Parameter<T>*> out{&tok_emb, &pos_emb, &emb_ln_g, &emb_ln_b};
  for (auto& l : layers) {
    for (auto* p : l.parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
ModelWeights<T>::ModelWeights(const ModelConfig& c)
    : cfg(c),
      encoder(c, "enc."),
      head_w("head.dense.w", Tensor<T>({c.d_model, c.d_model})),
      head_b("head.dense.b", Tensor<T>({c.d_model}), false),
      head_ln_g("head.ln.g", Tensor<T>({c.d_model}, T(1)), false),
      head_ln_b("head.ln.b", Tensor<T>({c.d_model}), false),
      head_out_b("head.out.b", Tensor<T>({c.vocab_size}), false) {
  decoder.reserve(c.n_dec_layers);
  for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
    decoder.emplace_back("dec.layer." + std::to_string(i) + ".", c.d_model, c.d_ff);
  }
}

template <typename T>
std::vector<Parameter<T>*> ModelWeights<T>::parameters() {
  auto out = encoder.parameters();
  for (auto& l : decoder) {
    for (auto* p : l.parameters()) out.push_back(p);
  }
  for (auto* p : {&head_w, &head_b, &head_ln_g, &head_ln_b, &head_out_b}) out.push_back(p);
  return out;
}

namespace {

bool is_gain(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

}  // namespace

template <typename T>
void init_weights(std::vector<Parameter<T>*> params, Rng& rng) {
  for (auto* p : params) {
    if (p->value.rank() >= 2) {
      for (auto& v : p->value.values()) v = static_cast<T>(rng.truncated_normal(0.02));
    } else {
      p->value.fill(is_gain(p->name) ? T(1) : T(0));
    }
    p->zero_grad();
  }
}

template <typename T>
ModelWeights<T> init_model(const ModelConfig& cfg, Rng& rng, DecoderInit decoder_init) {
  ModelWeights<T> w(cfg);
  init_weights(w.parameters(), rng);
  apply_decoder_init(w, decoder_init);
  return w;
}

template <typename T>
void apply_decoder_init(ModelWeights<T>& w, DecoderInit init) {
  const auto idx = decoder_init_layers(init, w.encoder.layers.size(), w.decoder.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    w.decoder[k].copy_values_from(w.encoder.layers[idx[k]]);
  }
}

// ---------------------------------------------------------------------------
// forward passes

namespace {

template <typename T>
Var<T> transformer_layer(Tape<T>& tape, LayerWeights<T>& l, const Var<T>& x,
                         const TokenBatch& batch, std::size_t n_heads, double p, Rng* rng) {
  auto drop = [&](const Var<T>& v) { return rng ? nn::dropout(v, p, *rng) : v; };
  auto q = nn::linear(x, tape.param(l.wq), tape.param(l.bq));
  auto k = nn::linear(x, tape.param(l.wk), tape.param(l.bk));
  auto v = nn::linear(x, tape.param(l.wv), tape.param(l.bv));
  auto a = nn::self_attention(q, k, v, batch.batch, batch.seq_len, n_heads,
                              std::span<const std::uint8_t>(batch.valid));
  auto o = nn::linear(a, tape.param(l.wo), tape.param(l.bo));
  auto h = nn::layer_norm(nn::add(x, drop(o)), tape.param(l.ln1_g), tape.param(l.ln1_b));
  auto f = nn::gelu(nn::linear(h, tape.param(l.w1), tape.param(l.b1)));
  f = nn::linear(f, tape.param(l.w2), tape.param(l.b2));
  return nn::layer_norm(nn::add(h, drop(f)), tape.param(l.ln2_g), tape.param(l.ln2_b));
}

std::vector<TokenId> position_ids(const TokenBatch& batch, std::size_t max_seq_len) {
  if (batch.seq_len > max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq_len) +
                                " exceeds max_seq_len " + std::to_string(max_seq_len));
  }
  std::vector<TokenId> pos(batch.batch * batch.seq_len);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    pos[i] = static_cast<TokenId>(i % batch.seq_len);
  }
  return pos;
}

std::vector<std::size_t> cls_rows(const TokenBatch& batch) {
  std::vector<std::size_t> rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) rows[b] = b * batch.seq_len;
  return rows;
}

template <typename T>
Var<T> embed_with_positions(Tape<T>& tape, EncoderWeights<T>& w, const Var<T>& tokens,
                            const TokenBatch& batch, Rng* rng) {
  const auto pos = position_ids(batch, w.cfg.max_seq_len);
  auto pe = nn::embedding(tape.param(w.pos_emb), std::span<const TokenId>(pos));
  auto x = nn::layer_norm(nn::add(tokens, pe), tape.param(w.emb_ln_g), tape.param(w.emb_ln_b));
  return rng ? nn::dropout(x, w.cfg.dropout, *rng) : x;
}

}  // namespace

template <typename T>
EncoderOutput<T> encode(Tape<T>& tape, EncoderWeights<T>& w, const TokenBatch& batch,
                        Rng* dropout_rng) {
  auto tok = nn::embedding(tape.param(w.tok_emb), std::span<const TokenId>(batch.ids));
  auto x = embed_with_positions(tape, w, tok, batch, dropout_rng);
  EncoderOutput<T> out;
  for (auto& layer : w.layers) {
    x = transformer_layer(tape, layer, x, batch, w.cfg.n_heads, w.cfg.dropout, dropout_rng);
    out.hidden.push_back(x);
  }
  const auto rows = cls_rows(batch);
  out.context = nn::gather_rows(x, std::span<const std::size_t>(rows));
  return out;
}

template <typename T>
Var<T> mlm_loss(Tape<T>& tape, ModelWeights<T>& w, const Var<T>& hidden,
                std::span<const int> labels) {
  if (labels.size() != hidden.value().rows()) {
    throw std::invalid_argument("mlm_loss: label count does not match hidden rows");
  }
  std::vector<std::size_t> rows;
  std::vector<int> picked;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == nn::kIgnoreLabel) continue;
    rows.push_back(i);
    picked.push_back(labels[i]);
  }
  if (rows.empty()) throw std::invalid_argument("no masked positions");
  auto h = nn::gather_rows(hidden, std::span<const std::size_t>(rows));
  h = nn::gelu(nn::linear(h, tape.param(w.head_w), tape.param(w.head_b)));
  h = nn::layer_norm(h, tape.param(w.head_ln_g), tape.param(w.head_ln_b));
  auto logits = nn::add_bias(nn::matmul(h, tape.param(w.encoder.tok_emb), true),
                             tape.param(w.head_out_b));
  return nn::masked_cross_entropy(logits, std::span<const int>(picked));
}

template <typename T>
Var<T> decoder_loss(Tape<T>& tape, ModelWeights<T>& w, const Var<T>& context,
                    const TokenBatch& batch, Rng* dropout_rng) {
  const auto& cv = context.value();
  if (cv.rank() != 2 || cv.dim(1) != w.cfg.d_model) {
    throw std::invalid_argument("decoder context width " + nn::shape_string(cv.shape()) +
                                " does not match d_model " + std::to_string(w.cfg.d_model));
  }
  if (cv.dim(0) != batch.batch) {
    throw std::invalid_argument("decoder needs one context vector per sequence");
  }
  auto& enc = w.encoder;
  auto tok = nn::embedding(tape.param(enc.tok_emb), std::span<const TokenId>(batch.ids));
  const auto rows = cls_rows(batch);
  tok = nn::replace_rows(tok, std::span<const std::size_t>(rows), context);
  auto x = embed_with_positions(tape, enc, tok, batch, dropout_rng);
  for (auto& layer : w.decoder) {
    x = transformer_layer(tape, layer, x, batch, w.cfg.n_heads, w.cfg.dropout, dropout_rng);
  }
  return mlm_loss(tape, w, x, std::span<const int>(batch.labels));
}

// ---------------------------------------------------------------------------
// pair loss

namespace {

std::vector<MaskedSpan> draw_role(std::span<const TokenSequence> seqs, double rate,
                                  const ModelConfig& cfg, Rng& rng, const char* role) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::vector<MaskedSpan> out;
    out.reserve(seqs.size());
    std::size_t masked = 0;
    for (const auto& s : seqs) {
      out.push_back(apply_mask(s, rate, rng, cfg.bert_corruption, cfg.vocab_size));
      masked += out.back().mask_positions.size();
    }
    if (masked > 0) return out;
  }
  throw std::invalid_argument(std::string("no masked positions in role ") + role +
                              " after resampling");
}

}  // namespace

PairMasks draw_pair_masks(std::span<const TokenSequence> a, std::span<const TokenSequence> b,
                          const ModelConfig& cfg, Rng& rng) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("draw_pair_masks needs equally many non-zero A and B spans");
  }
  PairMasks m;
  m.enc_a = draw_role(a, cfg.enc_mask_rate, cfg, rng, "enc_a");
  m.dec_b = draw_role(b, cfg.dec_mask_rate, cfg, rng, "dec_b");
  m.enc_b = draw_role(b, cfg.enc_mask_rate, cfg, rng, "enc_b");
  m.dec_a = draw_role(a, cfg.dec_mask_rate, cfg, rng, "dec_a");
  return m;
}

template <typename T>
Var<T> cotmae_loss_var(Tape<T>& tape, ModelWeights<T>& w, const PairMasks& masks,
                       Rng* dropout_rng, LossBreakdown* breakdown) {
  auto direction = [&](const std::vector<MaskedSpan>& enc_in,
                       const std::vector<MaskedSpan>& dec_in) {
    const auto eb = make_batch(std::span<const MaskedSpan>(enc_in));
    const auto db = make_batch(std::span<const MaskedSpan>(dec_in));
    auto enc = encode(tape, w.encoder, eb, dropout_rng);
    auto smlm = mlm_loss(tape, w, enc.hidden.back(), std::span<const int>(eb.labels));
    auto cmlm = decoder_loss(tape, w, enc.context, db, dropout_rng);
    return std::pair{smlm, cmlm};
  };
  auto [smlm_a, cmlm_ab] = direction(masks.enc_a, masks.dec_b);
  auto [smlm_b, cmlm_ba] = direction(masks.enc_b, masks.dec_a);
  auto total = nn::add(nn::add(smlm_a, cmlm_ab), nn::add(smlm_b, cmlm_ba));
  if (breakdown) {
    breakdown->l_smlm_a = static_cast<double>(smlm_a.value().item());
    breakdown->l_cmlm_ab = static_cast<double>(cmlm_ab.value().item());
    breakdown->l_smlm_b = static_cast<double>(smlm_b.value().item());
    breakdown->l_cmlm_ba = static_cast<double>(cmlm_ba.value().item());
    breakdown->total = static_cast<double>(total.value().item());
  }
  return total;
}

template <typename T>
LossBreakdown cotmae_loss(ModelWeights<T>& w, const PairMasks& masks, Rng* dropout_rng,
                          bool accumulate) {
  Tape<T> tape(accumulate);
  LossBreakdown out;
  auto total = cotmae_loss_var(tape, w, masks, dropout_rng, &out);
  if (accumulate) tape.backward(total);
  return out;
}

template <typename T>
ContextProbe probe_context(ModelWeights<T>& w, std::span<const TokenSequence> a,
                           std::span<const TokenSequence> b, std::size_t draws, Rng& rng) {
  if (a.size() < 2 || a.size() != b.size()) {
    throw std::invalid_argument("probe_context needs at least two aligned pairs");
  }
  if (draws == 0) throw std::invalid_argument("probe_context needs draws >= 1");
  std::vector<std::size_t> shifted(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) shifted[i] = (i + 1) % a.size();
  ContextProbe out;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto masks = draw_pair_masks(a, b, w.cfg, rng);
    Tape<T> tape(false);
    auto direction = [&](const std::vector<MaskedSpan>& enc_in, const std::vector<MaskedSpan>& dec_in) {
      const auto eb = make_batch(std::span<const MaskedSpan>(enc_in));
      const auto db = make_batch(std::span<const MaskedSpan>(dec_in));
      auto ctx = encode(tape, w.encoder, eb).context;
      auto wrong = nn::gather_rows(ctx, std::span<const std::size_t>(shifted));
      out.true_context += static_cast<double>(decoder_loss(tape, w, ctx, db).value().item());
      out.permuted_context += static_cast<double>(decoder_loss(tape, w, wrong, db).value().item());
    };
    direction(masks.enc_a, masks.dec_b);
    direction(masks.enc_b, masks.dec_a);
  }
  out.true_context /= static_cast<double>(2 * draws);
  out.permuted_context /= static_cast<double>(2 * draws);
  return out;
}

#define COTMAE_INSTANTIATE_MODEL(T)                                                        \
  template struct LayerWeights<T>;                                                         \
  template struct EncoderWeights<T>;                                                       \
  template struct ModelWeights<T>;                                                         \
  template void init_weights(std::vector<Parameter<T>*>, Rng&);                            \
  template ModelWeights<T> init_model(const ModelConfig&, Rng&, DecoderInit);              \
  template void apply_decoder_init(ModelWeights<T>&, DecoderInit);                         \
  template EncoderOutput<T> encode(Tape<T>&, EncoderWeights<T>&, const TokenBatch&, Rng*); \
  template Var<T> mlm_loss(Tape<T>&, ModelWeights<T>&, const Var<T>&, std::span<const int>); \
  template Var<T> decoder_loss(Tape<T>&, ModelWeights<T>&, const Var<T>&, const TokenBatch&, \
                               Rng*);                                                      \
  template Var<T> cotmae_loss_var(Tape<T>&, ModelWeights<T>&, const PairMasks&, Rng*,      \
                                  LossBreakdown*);                                         \
  template LossBreakdown cotmae_loss(ModelWeights<T>&, const PairMasks&, Rng*, bool);      \
  template ContextProbe probe_context(ModelWeights<T>&, std::span<const TokenSequence>,    \
                                      std::span<const TokenSequence>, std::size_t, Rng&);

COTMAE_INSTANTIATE_MODEL(float)
COTMAE_INSTANTIATE_MODEL(double)

#undef COTMAE_INSTANTIATE_MODEL

nn::GradCheckResult grad_check_model(const ModelConfig& cfg, std::uint64_t seed,
                                     std::size_t batch, const nn::GradCheckOptions& opts) {
  cfg.validate();
  if (cfg.vocab_size <= special::kCount) throw std::invalid_argument("grad check needs non-special tokens");
  Rng rng(seed);
  auto w = init_model<double>(cfg, rng);
  const std::size_t lo = std::max<std::size_t>(2, cfg.max_seq_len / 2);
  auto draw = [&] {
    TokenSequence s{special::kCls};
    const std::size_t len = lo + rng.below(cfg.max_seq_len - lo + 1);
    while (s.size() < len) {
      s.push_back(static_cast<TokenId>(special::kCount + rng.below(cfg.vocab_size - special::kCount)));
    }
    return s;
  };
  std::vector<TokenSequence> a, b;
  for (std::size_t i = 0; i < batch; ++i) {
    a.push_back(draw());
    b.push_back(draw());
  }
  const auto masks = draw_pair_masks(a, b, cfg, rng);
  return nn::grad_check([&](nn::Tape<double>& t) { return cotmae_loss_var(t, w, masks, nullptr); },
                        w.parameters(), opts);
}

}  // namespace cotmae
