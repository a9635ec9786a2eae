#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/nn/grad_check.hpp"
#include "cotmae/nn/ops.hpp"
#include "cotmae/tokenizer.hpp"

namespace cotmae {

/// Which encoder layers seed the decoder before pre-training.
enum class DecoderInit { random, first, uniform, last };

std::string_view to_string(DecoderInit d);
DecoderInit decoder_init_from_string(std::string_view s);

/// Encoder layer index copied into each decoder layer. `uniform` picks
/// (k+1)*n_enc/n_dec - 1, e.g. (5, 11) for 12 encoder and 2 decoder layers.
std::vector<std::size_t> decoder_init_layers(DecoderInit init, std::size_t n_enc,
                                             std::size_t n_dec);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 2;
  std::size_t max_seq_len = 128;
  double enc_mask_rate = 0.30;
  double dec_mask_rate = 0.45;
  double dropout = 0.1;
  /// BERT-style 80/10/10 corruption of chosen positions instead of pure [MASK].
  bool bert_corruption = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// A token sequence after masking. labels[i] holds the original id at masked
/// positions and nn::kIgnoreLabel elsewhere.
struct MaskedSpan {
  TokenSequence input_ids;
  std::vector<int> labels;
  std::vector<std::size_t> mask_positions;
};

/// Number of positions apply_mask selects for a sequence of `len` tokens.
std::size_t mask_count(std::size_t len, double rate);

/// Masks exactly mask_count(len, rate) positions drawn uniformly without
/// replacement from 1..len-1; [CLS] is never chosen. With bert_corruption a
/// chosen position becomes [MASK] 80%, a random non-special token 10%, or is
/// left unchanged 10% of the time (vocab_size is required then).
MaskedSpan apply_mask(const TokenSequence& seq, double rate, Rng& rng,
                      bool bert_corruption = false, std::size_t vocab_size = 0);

/// Sequences right-padded with [PAD] to the longest one, flattened row-major
/// as [batch * seq_len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;
  std::vector<int> labels;
};

TokenBatch make_batch(std::span<const MaskedSpan> spans);
TokenBatch make_batch(std::span<const TokenSequence> seqs);

template <typename T>
struct LayerWeights {
  nn::Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  nn::Parameter<T> ln1_g, ln1_b;
  nn::Parameter<T> w1, b1, w2, b2;
  nn::Parameter<T> ln2_g, ln2_b;

  LayerWeights() = default;
  LayerWeights(const std::string& prefix, std::size_t d, std::size_t d_ff);
  std::vector<nn::Parameter<T>*> parameters();
  /// Copies values from another layer of identical shape, keeping names.
  void copy_values_from(const LayerWeights& other);
};

/// Embeddings plus the transformer stack: everything a retrieval encoder needs.
template <typename T>
struct EncoderWeights {
  ModelConfig cfg;
  nn::Parameter<T> tok_emb, pos_emb, emb_ln_g, emb_ln_b;
  std::vector<LayerWeights<T>> layers;

  EncoderWeights() = default;
  /// Zero-filled tensors named under `prefix` (e.g. "enc.").
  EncoderWeights(const ModelConfig& cfg, const std::string& prefix);
  std::vector<nn::Parameter<T>*> parameters();
};

/// Full pre-training network. The decoder shares the encoder's token and
/// position embeddings (and their layer norm); the MLM head is shared by both
/// and its output projection is tied to the token embeddings.
template <typename T>
struct ModelWeights {
  ModelConfig cfg;
  EncoderWeights<T> encoder;
  std::vector<LayerWeights<T>> decoder;
  nn::Parameter<T> head_w, head_b, head_ln_g, head_ln_b, head_out_b;

  ModelWeights() = default;
  explicit ModelWeights(const ModelConfig& cfg);
  std::vector<nn::Parameter<T>*> parameters();
};

/// Truncated normal (std 0.02) for matrices and embeddings, zero biases,
/// unit gains. Draws follow parameters() order.
template <typename T>
void init_weights(std::vector<nn::Parameter<T>*> params, Rng& rng);

template <typename T>
ModelWeights<T> init_model(const ModelConfig& cfg, Rng& rng,
                           DecoderInit decoder_init = DecoderInit::random);

/// Overwrites decoder layers with copies of encoder layers.
template <typename T>
void apply_decoder_init(ModelWeights<T>& w, DecoderInit init);

template <typename T>
struct EncoderOutput {
  /// Output of every layer, last entry is the final hidden state
  /// [batch * seq_len, d_model].
  std::vector<nn::Var<T>> hidden;
  /// Final-layer [CLS] rows, [batch, d_model].
  nn::Var<T> context;
};

/// Bidirectional encoder pass. `dropout_rng` may be null to disable dropout.
template <typename T>
EncoderOutput<T> encode(nn::Tape<T>& tape, EncoderWeights<T>& w, const TokenBatch& batch,
                        Rng* dropout_rng = nullptr);

/// Masked-token cross-entropy of the shared head over the labelled rows of
/// `hidden`, averaged over all masked tokens of the batch.
template <typename T>
nn::Var<T> mlm_loss(nn::Tape<T>& tape, ModelWeights<T>& w, const nn::Var<T>& hidden,
                    std::span<const int> labels);

/// Decoder pass: row 0 of each sequence is replaced by the matching context
/// vector before position embeddings are added. Returns the context-MLM loss.
template <typename T>
nn::Var<T> decoder_loss(nn::Tape<T>& tape, ModelWeights<T>& w, const nn::Var<T>& context,
                        const TokenBatch& batch, Rng* dropout_rng = nullptr);

struct LossBreakdown {
  double l_smlm_a = 0.0;
  double l_cmlm_ab = 0.0;
  double l_smlm_b = 0.0;
  double l_cmlm_ba = 0.0;
  double total = 0.0;
};

/// The four masked views a batch of span pairs needs.
struct PairMasks {
  std::vector<MaskedSpan> enc_a, dec_b, enc_b, dec_a;
};

/// Draws enc_a, dec_b, enc_b, dec_a in that order. A role whose batch ends up
/// with no masked position is redrawn once; a second failure throws.
PairMasks draw_pair_masks(std::span<const TokenSequence> a, std::span<const TokenSequence> b,
                          const ModelConfig& cfg, Rng& rng);

/// Both directions of the pair loss on one tape. When `accumulate` is set the
/// total is backpropagated, adding into every parameter's grad.
template <typename T>
LossBreakdown cotmae_loss(ModelWeights<T>& w, const PairMasks& masks, Rng* dropout_rng,
                          bool accumulate);

/// Same computation, returning the total on the caller's tape (for grad_check).
template <typename T>
nn::Var<T> cotmae_loss_var(nn::Tape<T>& tape, ModelWeights<T>& w, const PairMasks& masks,
                           Rng* dropout_rng, LossBreakdown* breakdown = nullptr);

struct ContextProbe {
  /// Mean context-MLM loss over both directions with the partner's context.
  double true_context = 0.0;
  /// Same masks, contexts rotated by one position within the batch.
  double permuted_context = 0.0;
};

/// Measures how much the decoder relies on the context vector: `draws` fresh
/// mask draws over the pairs (a[i], b[i]), no dropout. Needs at least two pairs.
template <typename T>
ContextProbe probe_context(ModelWeights<T>& w, std::span<const TokenSequence> a,
                           std::span<const TokenSequence> b, std::size_t draws, Rng& rng);

/// Gradient check of the full pair loss in double precision on random
/// token pairs of `batch` sequences with lengths up to max_seq_len.
nn::GradCheckResult grad_check_model(const ModelConfig& cfg, std::uint64_t seed,
                                     std::size_t batch = 2, const nn::GradCheckOptions& opts = {});

}  // namespace cotmae
