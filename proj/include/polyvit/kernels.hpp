#pragma once

// Value-level math on Tensor<T>. The autodiff tape and the no-tape evaluator
// both route through these functions, so a forward pass produces bit-identical
// values whether or not gradients are being recorded. That equivalence is load
// bearing: finite-difference checks probe the no-tape path and compare against
// tape gradients.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

#include "polyvit/tensor.hpp"

namespace polyvit::kernels {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* who) {
  if (t.rank() != 2)
    throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got " +
                                shape_str(t.shape()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw std::invalid_argument("matmul: inner extents disagree, " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T{0});
  const T* pa = a.begin();
  const T* pb = b.begin();
  for (std::size_t i = 0; i < m; ++i) {
    T* po = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T aik = pa[i * k + kk];
      const T* pbk = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) po[j] += aik * pbk[j];
    }
  }
  return Tensor<T>({m, n}, std::move(out));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor<T>({n, m}, std::move(out));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shapes disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shapes disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>(a.shape(), std::move(out));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor<T>(a.shape(), std::move(out));
}

// out[i, :] = m[i, :] + v. v may be rank-1 [n] or a single row [1 x n].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& m, const Tensor<T>& v) {
  require_rank2(m, "add_rowvec");
  if (v.numel() != m.extent(1))
    throw std::invalid_argument("add_rowvec: vector length " +
                                std::to_string(v.numel()) + " vs row width " +
                                std::to_string(m.extent(1)));
  std::vector<T> out(m.numel());
  const std::size_t rows = m.extent(0), n = m.extent(1);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = m[i * n + j] + v[j];
  return Tensor<T>(m.shape(), std::move(out));
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::vector<T> out;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.extent(1) != n)
      throw std::invalid_argument("concat_rows: column widths disagree");
    out.insert(out.end(), p.begin(), p.end());
    rows += p.extent(0);
  }
  return Tensor<T>({rows, n}, std::move(out));
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts.front().extent(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.extent(0) != rows)
      throw std::invalid_argument("concat_cols: row counts disagree");
    total += p.extent(1);
  }
  std::vector<T> out(rows * total);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.extent(1);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * total + col0 + j] = p[i * n + j];
    col0 += n;
  }
  return Tensor<T>({rows, total}, std::move(out));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t row0, std::size_t count) {
  require_rank2(a, "slice_rows");
  if (row0 + count > a.extent(0))
    throw std::invalid_argument("slice_rows: range exceeds row count");
  const std::size_t n = a.extent(1);
  std::vector<T> out(a.begin() + row0 * n, a.begin() + (row0 + count) * n);
  return Tensor<T>({count, n}, std::move(out));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s{0};
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
  return Tensor<T>::scalar(s);
}

// LayerNorm over the last axis with population variance (divide by width, not
// width - 1) and epsilon added inside the square root. The normalized values
// and per-row inverse stddev are returned because the backward rule reuses
// them; value-only callers drop them.
template <typename T>
struct LayerNormResult {
  Tensor<T> out;
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
LayerNormResult<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, T eps) {
  require_rank2(x, "layer_norm");
  const std::size_t rows = x.extent(0), n = x.extent(1);
  if (gamma.numel() != n || beta.numel() != n)
    throw std::invalid_argument("layer_norm: gamma/beta width mismatch");
  std::vector<T> out(rows * n), xhat(rows * n), inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* px = x.begin() + i * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += px[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T c = px[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(n);
    const T s = T{1} / std::sqrt(var + eps);
    inv_std[i] = s;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = (px[j] - mean) * s;
      xhat[i * n + j] = xh;
      out[i * n + j] = xh * gamma[j] + beta[j];
    }
  }
  return {Tensor<T>(x.shape(), std::move(out)), Tensor<T>(x.shape(), std::move(xhat)),
          std::move(inv_std)};
}

// Exact GELU, x * Phi(x) with the Gaussian CDF via erf. The derivative is
// Phi(x) + x * phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = static_cast<T>(0.5) * v *
             (T{1} + std::erf(v * static_cast<T>(0.7071067811865475)));
  }
  return Tensor<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor<T> gelu_grad_factor(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = static_cast<T>(0.7071067811865475);
  constexpr T inv_sqrt2pi = static_cast<T>(0.3989422804014327);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(v * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
    out[i] = cdf + v * pdf;
  }
  return Tensor<T>(x.shape(), std::move(out));
}

// Row-wise softmax with max subtraction; exact for one-hot-scale logits and
// stable for anything the encoder can emit.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t rows = x.extent(0), n = x.extent(1);
  std::vector<T> out(rows * n);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* px = x.begin() + i * n;
    T m = px[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, px[j]);
    T denom{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T e = std::exp(px[j] - m);
      out[i * n + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
  }
  return Tensor<T>(x.shape(), std::move(out));
}

// Cross entropy for a single logit row against a target distribution, through
// log-sum-exp: loss = lse(x) * sum(t) - sum(t * x). Targets may be soft
// (mixup); the gradient is softmax(x) * sum(t) - t.
template <typename T>
struct CrossEntropyResult {
  Tensor<T> loss;
  Tensor<T> probs;
  T target_mass;
};

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            const Tensor<T>& target) {
  if (logits.numel() != target.numel() || logits.numel() == 0)
    throw std::invalid_argument("softmax_cross_entropy: logit/target size mismatch");
  const std::size_t n = logits.numel();
  T m = logits[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);
  T denom{0};
  std::vector<T> probs(n);
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] = std::exp(logits[j] - m);
    denom += probs[j];
  }
  const T lse = m + std::log(denom);
  T mass{0}, dot{0};
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] /= denom;
    mass += target[j];
    dot += target[j] * logits[j];
  }
  return {Tensor<T>::scalar(lse * mass - dot), Tensor<T>({n}, std::move(probs)), mass};
}

// Mean over classes of the stable binary cross entropy
// max(x, 0) - x*y + log(1 + exp(-|x|)); gradient (sigmoid(x) - y) / n.
template <typename T>
Tensor<T> sigmoid_bce_mean(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.numel() != target.numel() || logits.numel() == 0)
    throw std::invalid_argument("sigmoid_bce_mean: logit/target size mismatch");
  const std::size_t n = logits.numel();
  T total{0};
  for (std::size_t j = 0; j < n; ++j) {
    const T x = logits[j];
    total += std::max(x, T{0}) - x * target[j] + std::log1p(std::exp(-std::abs(x)));
  }
  return Tensor<T>::scalar(total / static_cast<T>(n));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v))
                       : std::exp(v) / (T{1} + std::exp(v));
  }
  return Tensor<T>(x.shape(), std::move(out));
}

}  // namespace polyvit::kernels
