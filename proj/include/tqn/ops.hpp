#pragma once

// Differentiable primitives. Every op computes its value eagerly and, when a
// ComputationRecord is active and some input requires a gradient, records a
// backward closure. Matrices are row-major; normalizations act on the last axis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "tqn/rng.hpp"
#include "tqn/tensor.hpp"

namespace tqn {

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_record() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void attach(Tensor& out, std::vector<NodePtr> inputs, ComputationRecord::BackwardFn backward) {
  out.set_requires_grad(true);
  inputs.push_back(out.node());
  active_record()->record(std::move(inputs), std::move(backward));
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (t.rank() != 1 && t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

inline Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  Tensor c(detail::matrix_shape(m, n), std::move(out));
  if (detail::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node(), b.node()}, [an, bn, cn, m, k, n] {
      if (an->requires_grad) detail::gemm_nt(cn->adjoint.data(), bn->value.data(), an->adjoint.data(), m, n, k);
      if (bn->requires_grad) detail::gemm_tn(an->value.data(), cn->adjoint.data(), bn->adjoint.data(), m, k, n);
    });
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  Tensor c(detail::matrix_shape(n, m), std::move(out));
  if (detail::tracking({&a})) {
    auto* an = a.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node()}, [an, cn, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) an->adjoint[i * n + j] += cn->adjoint[j * m + i];
    });
  }
  return c;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  Tensor c(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  if (detail::tracking({&a})) {
    auto* an = a.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node()}, [an, cn] {
      for (std::size_t i = 0; i < an->adjoint.size(); ++i) an->adjoint[i] += cn->adjoint[i];
    });
  }
  return c;
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor c(a.shape(), std::move(out));
  if (detail::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node(), b.node()}, [an, bn, cn] {
      const auto& g = cn->adjoint;
      if (an->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) an->adjoint[i] += g[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) bn->adjoint[i] += g[i];
    });
  }
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor c(a.shape(), std::move(out));
  if (detail::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node(), b.node()}, [an, bn, cn] {
      const auto& g = cn->adjoint;
      if (an->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) an->adjoint[i] += g[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) bn->adjoint[i] -= g[i];
    });
  }
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor c(a.shape(), std::move(out));
  if (detail::tracking({&a, &b})) {
    auto* an = a.node().get();
    auto* bn = b.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node(), b.node()}, [an, bn, cn] {
      const auto& g = cn->adjoint;
      if (an->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) an->adjoint[i] += g[i] * bn->value[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) bn->adjoint[i] += g[i] * an->value[i];
    });
  }
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  Tensor c(a.shape(), std::move(out));
  if (detail::tracking({&a})) {
    auto* an = a.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {a.node()}, [an, cn, s] {
      for (std::size_t i = 0; i < cn->adjoint.size(); ++i) an->adjoint[i] += cn->adjoint[i] * s;
    });
  }
  return c;
}

// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  Tensor c(x.shape(), std::move(out));
  if (detail::tracking({&x, &bias})) {
    auto* xn = x.node().get();
    auto* bn = bias.node().get();
    auto* cn = c.node().get();
    detail::attach(c, {x.node(), bias.node()}, [xn, bn, cn, m, n] {
      const auto& g = cn->adjoint;
      if (xn->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) xn->adjoint[i] += g[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) bn->adjoint[j] += g[i * n + j];
    });
  }
  return c;
}

// Adds row[1 x n] to every row of x[m x n].
inline Tensor add_row(const Tensor& x, const Tensor& row) { return add_bias(x, row); }

// tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  }
  Tensor y(x.shape(), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn] {
      for (std::size_t i = 0; i < yn->adjoint.size(); ++i) {
        const double v = xn->value[i];
        const double u = k * (v + c * v * v * v);
        const double th = std::tanh(u);
        const double du = k * (1.0 + 3.0 * c * v * v);
        const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        xn->adjoint[i] += yn->adjoint[i] * d;
      }
    });
  }
  return y;
}

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  Tensor y(x.shape(), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn] {
      for (std::size_t i = 0; i < yn->adjoint.size(); ++i) {
        const double s = yn->value[i];
        xn->adjoint[i] += yn->adjoint[i] * s * (1.0 - s);
      }
    });
  }
  return y;
}

namespace detail {

inline void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t n, std::size_t causal_offset,
                         bool causal) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * n;
    double* y = out + r * n;
    const std::size_t limit = causal ? std::min(n, r + causal_offset + 1) : n;
    double mx = x[0];
    for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < limit; ++j) y[j] *= inv;
    for (std::size_t j = limit; j < n; ++j) y[j] = 0.0;
  }
}

inline Tensor softmax_impl(const Tensor& x, bool causal) {
  if (!x.defined() || x.size() == 0) throw ShapeError("softmax: empty input");
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  softmax_rows(x.values().data(), out.data(), rows, n, 0, causal);
  Tensor y(x.shape(), std::move(out));
  if (tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    attach(y, {x.node()}, [xn, yn, rows, n] {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = yn->value.data() + r * n;
        const double* g = yn->adjoint.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
        double* dx = xn->adjoint.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) dx[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

}  // namespace detail

// Softmax along the last axis with max subtraction.
inline Tensor softmax(const Tensor& x) { return detail::softmax_impl(x, false); }

// Row r attends only to columns 0..r. Masked entries are exactly zero.
inline Tensor causal_softmax(const Tensor& x) {
  detail::require_matrix(x, "causal_softmax");
  return detail::softmax_impl(x, true);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (detail::tracking({&x, &gain, &bias})) {
    auto* xn = x.node().get();
    auto* gn = gain.node().get();
    auto* bn = bias.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node(), gain.node(), bias.node()},
                   [xn, gn, bn, yn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
                     std::vector<double> dxhat(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* g = yn->adjoint.data() + r * d;
                       const double* xh = xhat.data() + r * d;
                       if (gn->requires_grad)
                         for (std::size_t j = 0; j < d; ++j) gn->adjoint[j] += g[j] * xh[j];
                       if (bn->requires_grad)
                         for (std::size_t j = 0; j < d; ++j) bn->adjoint[j] += g[j];
                       if (!xn->requires_grad) continue;
                       double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         dxhat[j] = g[j] * gn->value[j];
                         mean_dxhat += dxhat[j];
                         mean_dxhat_xhat += dxhat[j] * xh[j];
                       }
                       mean_dxhat /= static_cast<double>(d);
                       mean_dxhat_xhat /= static_cast<double>(d);
                       double* dx = xn->adjoint.data() + r * d;
                       for (std::size_t j = 0; j < d; ++j)
                         dx[j] += inv_std[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                     }
                   });
  }
  return y;
}

// -log softmax(logits)[target] for a single logit vector.
inline Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t n = logits.size();
  if (n == 0) throw ShapeError("cross_entropy: empty logits");
  if (target >= n) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     std::to_string(n) + " classes");
  }
  const auto x = logits.values();
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  const double lse = mx + std::log(sum);
  const double loss = lse - x[target];
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Tensor y = Tensor::scalar(loss);
  if (detail::tracking({&logits})) {
    auto* xn = logits.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {logits.node()}, [xn, yn, lse, target, n] {
      const double g = yn->adjoint[0];
      for (std::size_t j = 0; j < n; ++j) {
        const double p = std::exp(xn->value[j] - lse);
        xn->adjoint[j] += g * (p - (j == target ? 1.0 : 0.0));
      }
    });
  }
  return y;
}

// Sum over entries of the numerically stable binary cross-entropy with logits.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  const std::size_t n = logits.size();
  if (targets.size() != n) throw ShapeError("bce_with_logits: target length mismatch");
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double x = logits[j];
    const double y = targets[j];
    if (y < 0.0 || y > 1.0) throw DomainError("bce_with_logits: target outside [0,1]");
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  if (!std::isfinite(loss)) throw NumericError("bce_with_logits: non-finite loss");
  Tensor out = Tensor::scalar(loss);
  if (detail::tracking({&logits})) {
    auto* xn = logits.node().get();
    auto* on = out.node().get();
    detail::attach(out, {logits.node()}, [xn, on, targets, n] {
      const double g = on->adjoint[0];
      for (std::size_t j = 0; j < n; ++j) xn->adjoint[j] += g * (sigmoid_scalar(xn->value[j]) - targets[j]);
    });
  }
  return out;
}

// Inverted dropout. Evaluation mode (train == false) or rate 0 is the identity.
inline Tensor dropout(const Tensor& x, double rate, bool train, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout: training mode needs an rng stream");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng->uniform() < rate ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  Tensor y(x.shape(), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn, mask = std::move(mask)] {
      for (std::size_t i = 0; i < mask.size(); ++i) xn->adjoint[i] += yn->adjoint[i] * mask[i];
    });
  }
  return y;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t n = x.cols();
  if (count == 0 || start + count > x.rows()) throw IndexError("slice_rows: range out of bounds");
  std::vector<double> out(x.values().begin() + start * n, x.values().begin() + (start + count) * n);
  Tensor y(detail::matrix_shape(count, n), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn, start, n] {
      for (std::size_t i = 0; i < yn->adjoint.size(); ++i) xn->adjoint[start * n + i] += yn->adjoint[i];
    });
  }
  return y;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > n) throw IndexError("slice_cols: range out of bounds");
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + start + j];
  Tensor y(detail::matrix_shape(m, count), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn, m, n, start, count] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) xn->adjoint[i * n + start + j] += yn->adjoint[i * count + j];
    });
  }
  return y;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  bool track = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    track = track || detail::tracking({&p});
  }
  Tensor y(detail::matrix_shape(m, n), std::move(out));
  if (track) {
    std::vector<detail::NodePtr> nodes;
    std::vector<detail::Node*> raw;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      raw.push_back(p.node().get());
    }
    auto* yn = y.node().get();
    detail::attach(y, std::move(nodes), [raw, yn] {
      std::size_t offset = 0;
      for (auto* pn : raw) {
        const std::size_t len = pn->value.size();
        if (pn->requires_grad)
          for (std::size_t i = 0; i < len; ++i) pn->adjoint[i] += yn->adjoint[offset + i];
        offset += len;
      }
    });
  }
  return y;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t offset = 0;
  bool track = false;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * n + offset + j] = p[i * c + j];
    offset += c;
    track = track || detail::tracking({&p});
  }
  Tensor y(detail::matrix_shape(m, n), std::move(out));
  if (track) {
    std::vector<detail::NodePtr> nodes;
    std::vector<detail::Node*> raw;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      raw.push_back(p.node().get());
    }
    auto* yn = y.node().get();
    detail::attach(y, std::move(nodes), [raw, yn, m, n] {
      std::size_t off = 0;
      for (auto* pn : raw) {
        const std::size_t c = pn->shape.back();
        if (pn->requires_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) pn->adjoint[i * c + j] += yn->adjoint[i * n + off + j];
        off += c;
      }
    });
  }
  return y;
}

// Column means: [m x n] -> [1 x n].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& v : out) v *= inv;
  Tensor y(detail::matrix_shape(1, n), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn, m, n, inv] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) xn->adjoint[i * n + j] += yn->adjoint[j] * inv;
    });
  }
  return y;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = Tensor::scalar(s);
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn] {
      for (auto& a : xn->adjoint) a += yn->adjoint[0];
    });
  }
  return y;
}

// Sum of scalar tensors in index order.
inline Tensor add_all(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ShapeError("add_all: no inputs");
  Tensor total = scalars.front();
  for (std::size_t i = 1; i < scalars.size(); ++i) total = add(total, scalars[i]);
  return total;
}

// Im2col within fixed-length clips. frames is [(clips*clip_len) x channels];
// the result has one row per valid kernel position inside each clip, holding
// `kernel` consecutive frames flattened: [(clips*(clip_len-kernel+1)) x (kernel*channels)].
// Windows never cross clip boundaries, so clips stay independent.
inline Tensor unfold_clips(const Tensor& frames, std::size_t clip_len, std::size_t kernel) {
  detail::require_matrix(frames, "unfold_clips");
  const std::size_t total = frames.rows(), ch = frames.cols();
  if (clip_len == 0 || kernel == 0 || kernel > clip_len || total % clip_len != 0) {
    throw ShapeError("unfold_clips: frame count " + std::to_string(total) + " incompatible with clip length " +
                     std::to_string(clip_len) + " and kernel " + std::to_string(kernel));
  }
  const std::size_t clips = total / clip_len;
  const std::size_t positions = clip_len - kernel + 1;
  const std::size_t width = kernel * ch;
  std::vector<double> out(clips * positions * width);
  for (std::size_t c = 0; c < clips; ++c)
    for (std::size_t p = 0; p < positions; ++p) {
      const double* src = frames.values().data() + (c * clip_len + p) * ch;
      std::copy(src, src + width, out.begin() + static_cast<std::ptrdiff_t>((c * positions + p) * width));
    }
  Tensor y(detail::matrix_shape(clips * positions, width), std::move(out));
  if (detail::tracking({&frames})) {
    auto* xn = frames.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {frames.node()}, [xn, yn, clips, positions, width, clip_len, ch] {
      for (std::size_t c = 0; c < clips; ++c)
        for (std::size_t p = 0; p < positions; ++p) {
          double* dst = xn->adjoint.data() + (c * clip_len + p) * ch;
          const double* g = yn->adjoint.data() + (c * positions + p) * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
        }
    });
  }
  return y;
}

// Mean over consecutive groups of `group` rows: [(g*count) x n] -> [count x n].
inline Tensor segment_mean(const Tensor& x, std::size_t group) {
  detail::require_matrix(x, "segment_mean");
  const std::size_t m = x.rows(), n = x.cols();
  if (group == 0 || m % group != 0) throw ShapeError("segment_mean: rows not divisible by group");
  const std::size_t count = m / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(count * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[(i / group) * n + j] += x[i * n + j];
  for (auto& v : out) v *= inv;
  Tensor y(detail::matrix_shape(count, n), std::move(out));
  if (detail::tracking({&x})) {
    auto* xn = x.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {x.node()}, [xn, yn, m, n, group, inv] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) xn->adjoint[i * n + j] += yn->adjoint[(i / group) * n + j] * inv;
    });
  }
  return y;
}

// Rows of `table` selected by index (embedding lookup).
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& index) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t n = table.cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  std::vector<double> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= table.rows()) throw IndexError("gather_rows: index out of range");
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(index[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  Tensor y(detail::matrix_shape(index.size(), n), std::move(out));
  if (detail::tracking({&table})) {
    auto* tn = table.node().get();
    auto* yn = y.node().get();
    detail::attach(y, {table.node()}, [tn, yn, index, n] {
      for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) tn->adjoint[index[r] * n + j] += yn->adjoint[r * n + j];
    });
  }
  return y;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace tqn
