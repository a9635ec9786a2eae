#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/nn/tape.hpp"

namespace cotmae::nn {

/// Label value excluded from masked_cross_entropy.
inline constexpr int kIgnoreLabel = -100;

/// a[m,k] * b[k,n], or a[m,k] * b[n,k]^T when transpose_b is set.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false);

/// a[p,m,k] * b[p,k,n] -> [p,m,n].
template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// x[..., d] + bias[d] broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

/// x * w + b.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b);
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& x);

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x);

/// Normalizes each row to zero mean / unit population variance, then applies
/// gamma and beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-12));

/// Rows of table[V, d] selected by ids -> [ids.size(), d].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows);

/// Copy of x with x[rows[i]] replaced by src[i].
template <typename T>
Var<T> replace_rows(const Var<T>& x, std::span<const std::size_t> rows, const Var<T>& src);

/// Multi-head scaled dot-product self-attention over `batch` sequences of
/// `seq_len` rows each (q, k, v are [batch*seq_len, d]). Keys with
/// key_valid == 0 receive zero attention. Fully bidirectional.
template <typename T>
Var<T> self_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                      std::size_t seq_len, std::size_t n_heads,
                      std::span<const std::uint8_t> key_valid);

/// Inverted dropout. Returns x itself when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng);

/// Mean over non-ignored rows of -log softmax(logits)[label].
template <typename T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const int> labels);

/// For each row r: -log softmax(scores[r, candidates[r]])[0], averaged over
/// rows. The first candidate of each row is the target.
template <typename T>
Var<T> candidate_cross_entropy(const Var<T>& scores,
                               const std::vector<std::vector<std::size_t>>& candidates);

}  // namespace cotmae::nn
