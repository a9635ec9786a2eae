#include "cotmae/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cotmae::nn {

namespace {

// Four partial sums; the fixed order keeps results reproducible.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      if (a[p] != T(0)) axpy(a[p], B + p * n, c, n);
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += dot(a, B + j * k, k);
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      if (a[p] != T(0)) axpy(a[p], b, C + p * n, n);
    }
  }
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("op mixes variables from different tapes");
}

}  // namespace

// ---------------------------------------------------------------------------
// products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b) {
  require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  require(A.rank() == 2 && B.rank() == 2, "matmul expects 2-D operands, got " +
                                              shape_string(A.shape()) + " and " +
                                              shape_string(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1);
  const std::size_t n = transpose_b ? B.dim(0) : B.dim(1);
  const std::size_t kb = transpose_b ? B.dim(1) : B.dim(0);
  require(k == kb, "matmul shape mismatch: " + shape_string(A.shape()) + " x " +
                       shape_string(B.shape()) + (transpose_b ? "^T" : ""));

  Tensor<T> out(Shape{m, n});
  if (transpose_b) {
    gemm_nt(A.data(), B.data(), out.data(), m, k, n);
  } else {
    gemm_nn(A.data(), B.data(), out.data(), m, k, n);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& dC = t.grad(self);
    const auto& Av = t.value(ia);
    const auto& Bv = t.value(ib);
    if (t.needs_grad(ia)) {
      auto& dA = t.grad(ia);
      if (transpose_b) {
        gemm_nn(dC.data(), Bv.data(), dA.data(), m, n, k);  // dA = dC B
      } else {
        gemm_nt(dC.data(), Bv.data(), dA.data(), m, n, k);  // dA = dC B^T
      }
    }
    if (t.needs_grad(ib)) {
      auto& dB = t.grad(ib);
      if (transpose_b) {
        gemm_tn(dC.data(), Av.data(), dB.data(), m, n, k);  // dB = dC^T A
      } else {
        gemm_tn(Av.data(), dC.data(), dB.data(), m, k, n);  // dB = A^T dC
      }
    }
  });
}

template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(1),
          "batched_matmul shape mismatch: " + shape_string(A.shape()) + " x " +
              shape_string(B.shape()));
  const std::size_t p = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(2);
  Tensor<T> out(Shape{p, m, n});
  for (std::size_t s = 0; s < p; ++s) {
    gemm_nn(A.data() + s * m * k, B.data() + s * k * n, out.data() + s * m * n, m, k, n);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& dC = t.grad(self);
    for (std::size_t s = 0; s < p; ++s) {
      const T* dc = dC.data() + s * m * n;
      if (t.needs_grad(ia)) {
        gemm_nt(dc, t.value(ib).data() + s * k * n, t.grad(ia).data() + s * m * k, m, n, k);
      }
      if (t.needs_grad(ib)) {
        gemm_tn(t.value(ia).data() + s * m * k, dc, t.grad(ib).data() + s * k * n, m, k, n);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  require(A.shape() == B.shape(),
          "add shape mismatch: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& d = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  require_same_tape(x, bias);
  const auto& X = x.value();
  const auto& Bv = bias.value();
  require(Bv.rank() == 1 && X.cols() == Bv.size(), "add_bias shape mismatch: " +
                                                       shape_string(X.shape()) + " + " +
                                                       shape_string(Bv.shape()));
  const std::size_t rows = X.rows(), d = X.cols();
  Tensor<T> out = X;
  for (std::size_t r = 0; r < rows; ++r) axpy(T(1), Bv.data(), out.row(r), d);
  const auto ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ix)) {
      auto& dx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& db = t.grad(ib);
      for (std::size_t r = 0; r < rows; ++r) axpy(T(1), g.row(r), db.data(), d);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  const auto& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const T v = X[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& Xv = t.value(ix);
    auto& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = Xv[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T deriv = T(0.5) * (T(1) + th) +
                      T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
      dx[i] += g[i] * deriv;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const auto& X = x.value();
  require(X.rank() >= 1 && X.cols() > 0, "softmax over empty axis");
  const std::size_t rows = X.rows(), d = X.cols();
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = X.row(r);
    T* o = out.row(r);
    const T mx = *std::max_element(in, in + d);
    T sum = 0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= sum;
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& Y = t.value(self);
    auto& dx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = Y.row(r);
      const T* gy = g.row(r);
      const T s = dot(y, gy, d);
      T* o = dx.row(r);
      for (std::size_t j = 0; j < d; ++j) o[j] += y[j] * (gy[j] - s);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const auto& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  require(d >= 1 && gamma.value().size() == d && beta.value().size() == d,
          "layer_norm parameter shape mismatch for input " + shape_string(X.shape()));
  const auto& G = gamma.value();
  const auto& Bv = beta.value();

  Tensor<T> out(X.shape());
  Tensor<T> xhat(X.shape());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = X.row(r);
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    T* xh = xhat.row(r);
    T* o = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (in[j] - mean) * rstd[r];
      o[j] = xh[j] * G[j] + Bv[j];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& Gv = t.value(ig);
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.row(r);
            const T* xh = xhat.row(r);
            if (t.needs_grad(ig)) {
              T* dg = t.grad(ig).data();
              for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xh[j];
            }
            if (t.needs_grad(ib)) axpy(T(1), gr, t.grad(ib).data(), d);
          }
        }
        if (!t.needs_grad(ix)) return;
        auto& dx = t.grad(ix);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.row(r);
          const T* xh = xhat.row(r);
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = gr[j] * Gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
          }
          mean_d /= static_cast<T>(d);
          mean_dx /= static_cast<T>(d);
          T* o = dx.row(r);
          for (std::size_t j = 0; j < d; ++j) {
            o[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// indexing

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  const auto& E = table.value();
  require(E.rank() == 2, "embedding table must be 2-D");
  require(!ids.empty(), "embedding lookup with no ids");
  const std::size_t V = E.dim(0), d = E.dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(V) + " rows");
    }
    std::copy_n(E.row(static_cast<std::size_t>(ids[i])), d, out.row(i));
  }
  const auto it = table.id();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [=, saved = std::move(saved)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.grad(self);
                               auto& dE = t.grad(it);
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                 axpy(T(1), g.row(i), dE.row(static_cast<std::size_t>(saved[i])), d);
                               }
                             });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
  const auto& X = x.value();
  require(X.rank() == 2, "gather_rows expects a 2-D input, got " + shape_string(X.shape()));
  require(!rows.empty(), "gather_rows with no rows");
  const std::size_t d = X.cols();
  Tensor<T> out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.dim(0)) throw std::out_of_range("gather_rows index out of range");
    std::copy_n(X.row(rows[i]), d, out.row(i));
  }
  const auto ix = x.id();
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {x},
                         [=, saved = std::move(saved)](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& dx = t.grad(ix);
                           for (std::size_t i = 0; i < saved.size(); ++i) {
                             axpy(T(1), g.row(i), dx.row(saved[i]), d);
                           }
                         });
}

template <typename T>
Var<T> replace_rows(const Var<T>& x, std::span<const std::size_t> rows, const Var<T>& src) {
  require_same_tape(x, src);
  const auto& X = x.value();
  const auto& S = src.value();
  require(X.rank() == 2 && S.rank() == 2 && S.dim(0) == rows.size() && S.dim(1) == X.dim(1),
          "replace_rows shape mismatch: " + shape_string(X.shape()) + " <- " +
              shape_string(S.shape()));
  const std::size_t d = X.cols();
  Tensor<T> out = X;
  std::vector<std::uint8_t> replaced(X.dim(0), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.dim(0)) throw std::out_of_range("replace_rows index out of range");
    if (replaced[rows[i]]) throw std::invalid_argument("replace_rows: duplicate row index");
    replaced[rows[i]] = 1;
    std::copy_n(S.row(i), d, out.row(rows[i]));
  }
  const auto ix = x.id(), is = src.id();
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return x.tape().record(
      std::move(out), {x, src},
      [=, saved = std::move(saved), replaced = std::move(replaced)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.needs_grad(ix)) {
          auto& dx = t.grad(ix);
          for (std::size_t r = 0; r < replaced.size(); ++r) {
            if (!replaced[r]) axpy(T(1), g.row(r), dx.row(r), d);
          }
        }
        if (t.needs_grad(is)) {
          auto& ds = t.grad(is);
          for (std::size_t i = 0; i < saved.size(); ++i) axpy(T(1), g.row(saved[i]), ds.row(i), d);
        }
      });
}

// ---------------------------------------------------------------------------
// attention

template <typename T>
Var<T> self_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                      std::size_t seq_len, std::size_t n_heads,
                      std::span<const std::uint8_t> key_valid) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& Vv = v.value();
  require(Q.rank() == 2 && Q.shape() == K.shape() && Q.shape() == Vv.shape(),
          "self_attention expects equal 2-D q/k/v shapes");
  require(Q.dim(0) == batch * seq_len, "self_attention: rows != batch * seq_len");
  require(key_valid.size() == batch * seq_len, "self_attention: key mask size mismatch");
  const std::size_t d = Q.dim(1);
  require(n_heads > 0 && d % n_heads == 0, "self_attention: d_model not divisible by heads");
  const std::size_t dh = d / n_heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t L = seq_len;

  Tensor<T> out(Q.shape());
  // probabilities, [batch, heads, L, L]
  std::vector<T> probs(batch * n_heads * L * L, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* valid = key_valid.data() + b * L;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* P = probs.data() + (b * n_heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const T* qi = Q.row(b * L + i) + h * dh;
        T* pr = P + i * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (!valid[j]) continue;
          pr[j] = dot(qi, K.row(b * L + j) + h * dh, dh) * scl;
          mx = std::max(mx, pr[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!valid[j]) continue;
          pr[j] = std::exp(pr[j] - mx);
          sum += pr[j];
        }
        T* o = out.row(b * L + i) + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          if (!valid[j]) continue;
          pr[j] /= sum;
          axpy(pr[j], Vv.row(b * L + j) + h * dh, o, dh);
        }
      }
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  std::vector<std::uint8_t> mask(key_valid.begin(), key_valid.end());
  return q.tape().record(
      std::move(out), {q, k, v},
      [=, probs = std::move(probs), mask = std::move(mask)](Tape<T>& t, std::size_t self) {
        const auto& dO = t.grad(self);
        const auto& Qv = t.value(iq);
        const auto& Kv = t.value(ik);
        const auto& V2 = t.value(iv);
        const bool gq = t.needs_grad(iq), gk = t.needs_grad(ik), gv = t.needs_grad(iv);
        T* dQ = gq ? t.grad(iq).data() : nullptr;
        T* dK = gk ? t.grad(ik).data() : nullptr;
        T* dV = gv ? t.grad(iv).data() : nullptr;
        std::vector<T> dS(L);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::uint8_t* valid = mask.data() + b * L;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* P = probs.data() + (b * n_heads + h) * L * L;
            for (std::size_t i = 0; i < L; ++i) {
              const T* doi = dO.row(b * L + i) + h * dh;
              const T* pr = P + i * L;
              T row_dot = 0;
              for (std::size_t j = 0; j < L; ++j) {
                if (!valid[j]) {
                  dS[j] = 0;
                  continue;
                }
                if (gv) axpy(pr[j], doi, dV + (b * L + j) * d + h * dh, dh);
                dS[j] = dot(doi, V2.row(b * L + j) + h * dh, dh);  // dP
                row_dot += pr[j] * dS[j];
              }
              for (std::size_t j = 0; j < L; ++j) {
                if (!valid[j]) continue;
                const T ds = pr[j] * (dS[j] - row_dot) * scl;
                if (gq) axpy(ds, Kv.row(b * L + j) + h * dh, dQ + (b * L + i) * d + h * dh, dh);
                if (gk) axpy(ds, Qv.row(b * L + i) + h * dh, dK + (b * L + j) * d + h * dh, dh);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// regularization and losses

template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  require(p < 1.0, "dropout probability must be < 1");
  const auto& X = x.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(X.shape());
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = X[i] * mask[i];
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [=, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& dx = t.grad(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
                         });
}

template <typename T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto& Z = logits.value();
  require(Z.rank() == 2, "masked_cross_entropy expects [n, V] logits");
  const std::size_t n = Z.dim(0), V = Z.dim(1);
  require(labels.size() == n, "masked_cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(n) + " rows");
  std::size_t count = 0;
  for (int l : labels) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= V) {
      throw std::out_of_range("label " + std::to_string(l) + " outside " + std::to_string(V) +
                              " classes");
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("no masked positions");

  // softmax rows are kept for backward
  Tensor<T> probs(Z.shape());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] == kIgnoreLabel) continue;
    const T* z = Z.row(r);
    const T mx = *std::max_element(z, z + V);
    T sum = 0;
    T* pr = probs.row(r);
    for (std::size_t j = 0; j < V; ++j) {
      pr[j] = std::exp(z[j] - mx);
      sum += pr[j];
    }
    for (std::size_t j = 0; j < V; ++j) pr[j] /= sum;
    total += (mx + std::log(sum)) - z[labels[r]];
  }
  const T inv = T(1) / static_cast<T>(count);
  const auto iz = logits.id();
  std::vector<int> saved(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor<T>::scalar(total * inv), {logits},
      [=, probs = std::move(probs), saved = std::move(saved)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * inv;
        auto& dz = t.grad(iz);
        for (std::size_t r = 0; r < n; ++r) {
          if (saved[r] == kIgnoreLabel) continue;
          axpy(g, probs.row(r), dz.row(r), V);
          dz.at(r, static_cast<std::size_t>(saved[r])) -= g;
        }
      });
}

template <typename T>
Var<T> candidate_cross_entropy(const Var<T>& scores,
                               const std::vector<std::vector<std::size_t>>& candidates) {
  const auto& S = scores.value();
  require(S.rank() == 2 && candidates.size() == S.dim(0),
          "candidate_cross_entropy: one candidate list per score row required");
  const std::size_t rows = S.dim(0), cols = S.dim(1);
  std::vector<std::vector<T>> probs(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& c = candidates[r];
    if (c.size() < 2) throw std::invalid_argument("candidate set of size 1");
    T mx = -std::numeric_limits<T>::infinity();
    for (auto j : c) {
      if (j >= cols) throw std::out_of_range("candidate index out of range");
      mx = std::max(mx, S.at(r, j));
    }
    T sum = 0;
    probs[r].resize(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      probs[r][i] = std::exp(S.at(r, c[i]) - mx);
      sum += probs[r][i];
    }
    for (auto& p : probs[r]) p /= sum;
    total += (mx + std::log(sum)) - S.at(r, c[0]);
  }
  const T inv = T(1) / static_cast<T>(rows);
  const auto is = scores.id();
  return scores.tape().record(
      Tensor<T>::scalar(total * inv), {scores},
      [=, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * inv;
        auto& ds = t.grad(is);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto& c = candidates[r];
          for (std::size_t i = 0; i < c.size(); ++i) ds.at(r, c[i]) += g * probs[r][i];
          ds.at(r, c[0]) -= g;
        }
      });
}

// ---------------------------------------------------------------------------

#define COTMAE_INSTANTIATE_OPS(T)                                                              \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool);                                  \
  template Var<T> batched_matmul(const Var<T>&, const Var<T>&);                                \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> gelu(const Var<T>&);                                                         \
  template Var<T> softmax(const Var<T>&);                                                      \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                  \
  template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>);                     \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                    \
  template Var<T> replace_rows(const Var<T>&, std::span<const std::size_t>, const Var<T>&);    \
  template Var<T> self_attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,     \
                                 std::size_t, std::size_t, std::span<const std::uint8_t>);     \
  template Var<T> dropout(const Var<T>&, double, Rng&);                                        \
  template Var<T> masked_cross_entropy(const Var<T>&, std::span<const int>);                   \
  template Var<T> candidate_cross_entropy(const Var<T>&,                                       \
                                          const std::vector<std::vector<std::size_t>>&);

COTMAE_INSTANTIATE_OPS(float)
COTMAE_INSTANTIATE_OPS(double)

#undef COTMAE_INSTANTIATE_OPS

}  // namespace cotmae::nn
