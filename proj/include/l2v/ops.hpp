#pragma once

// Differentiable primitives. Every op checks its output for NaN/Inf and, when
// a tape is active and an input requires grad, records its backward rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"

namespace l2v {

enum class AttentionMode { Causal, Bidirectional };

inline constexpr std::string_view to_string(AttentionMode mode) {
  return mode == AttentionMode::Causal ? "causal" : "bidirectional";
}

/// Additive logit offset for disallowed attention pairs.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

template <class T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <class T>
void check_finite(std::span<const T> values, std::string_view op) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NumericFault(std::string(op) + " produced a non-finite value");
    }
  }
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op) {
  check_finite<T>(data, op);
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T, class... Ts>
Tape<T>* recording_tape(const Tensor<T>& first, const Ts&... rest) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  const bool any = first.requires_grad() || (rest.requires_grad() || ...);
  return any ? tape : nullptr;
}

/// Grad buffer of `s`, allocated on first use, or nullptr when `s` does not
/// take gradients.
template <class T>
T* grad_buffer(TensorStorage<T>* s) {
  if (!s->requires_grad) return nullptr;
  if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
  return s->grad.data();
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t m, std::size_t n) {
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
  return out;
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

inline void require_rank2(const Shape& s, std::string_view op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_string(s));
}

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

}  // namespace detail

/// A[m,k] x B[k,n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor<T> result = detail::make_result<T>({m, n}, std::move(out), "matmul");
  if (auto* tape = detail::recording_tape(a, b)) {
    auto sa = a.shared_storage(), sb = b.shared_storage(), so = result.shared_storage();
    tape->record(so, {sa, sb}, [sa, sb, so, m, k, n] {
      const T* dy = so->grad.data();
      if (T* da = detail::grad_buffer(sa.get())) detail::gemm_nt(dy, sb->data.data(), da, m, n, k);
      if (T* db = detail::grad_buffer(sb.get())) detail::gemm_tn(sa->data.data(), dy, db, m, k, n);
    }, "matmul");
  }
  return result;
}

/// X[m,k] x W[n,k]^T, the linear-layer form with W stored [out, in].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_rank2(x.shape(), "matmul_nt");
  detail::require_rank2(w.shape(), "matmul_nt");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
  if (w.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(x.shape()) + " x " +
                     shape_string(w.shape()) + "^T");
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), m, k, n);
  Tensor<T> result = detail::make_result<T>({m, n}, std::move(out), "matmul_nt");
  if (auto* tape = detail::recording_tape(x, w)) {
    auto sx = x.shared_storage(), sw = w.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx, sw}, [sx, sw, so, m, k, n] {
      const T* dy = so->grad.data();
      if (T* dx = detail::grad_buffer(sx.get())) detail::gemm_nn(dy, sw->data.data(), dx, m, n, k);
      if (T* dw = detail::grad_buffer(sw.get())) detail::gemm_tn(dy, sx->data.data(), dw, m, n, k);
    }, "matmul_nt");
  }
  return result;
}

namespace detail {

// Shared plumbing for elementwise binary ops: fwd(a, b) and the partials
// (da, db) given (a, b, dy).
template <class T, class Fwd, class Bwd>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd,
                             std::string_view op) {
  require_same_shape(a.shape(), b.shape(), op);
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  Tensor<T> result = make_result<T>(a.shape(), std::move(out), op);
  if (auto* tape = recording_tape(a, b)) {
    auto sa = a.shared_storage(), sb = b.shared_storage(), so = result.shared_storage();
    tape->record(so, {sa, sb}, [sa, sb, so, n, bwd] {
      T* da = grad_buffer(sa.get());
      T* db = grad_buffer(sb.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        auto [ga, gb] = bwd(sa->data[i], sb->data[i], dy[i]);
        if (da) da[i] += ga;
        if (db) db[i] += gb;
      }
    }, op);
  }
  return result;
}

template <class T, class Fwd, class Bwd>
Tensor<T> unary_elementwise(const Tensor<T>& x, Fwd fwd, Bwd bwd, std::string_view op) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  Tensor<T> result = make_result<T>(x.shape(), std::move(out), op);
  if (auto* tape = recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so, n, bwd] {
      T* dx = grad_buffer(sx.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += bwd(sx->data[i], so->data[i], dy[i]);
    }, op);
  }
  return result;
}

}  // namespace detail

/// Same values under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  if (shape == x.shape()) return x;
  Tensor<T> result(std::move(shape), x.values());
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so] {
      T* dx = detail::grad_buffer(sx.get());
      for (std::size_t i = 0; i < so->grad.size(); ++i) dx[i] += so->grad[i];
    }, "reshape");
  }
  return result;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return std::pair<T, T>{g, g}; }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return std::pair<T, T>{g, -g}; }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary_elementwise(
      x, [factor](T v) { return v * factor; }, [factor](T, T, T g) { return g * factor; },
      "scale");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); }, "relu");
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_elementwise(
      x, [](T v) { return v * v; }, [](T v, T, T g) { return T(2) * v * g; }, "square");
}

/// X[m,n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank2(x.shape(), "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) throw ShapeError("add_row: bias length does not match columns");
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[j];
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "add_row");
  if (auto* tape = detail::recording_tape(x, bias)) {
    auto sx = x.shared_storage(), sb = bias.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx, sb}, [sx, sb, so, m, n] {
      const T* dy = so->grad.data();
      if (T* dx = detail::grad_buffer(sx.get()))
        for (std::size_t i = 0; i < m * n; ++i) dx[i] += dy[i];
      if (T* db = detail::grad_buffer(sb.get()))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
    }, "add_row");
  }
  return result;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  Tensor<T> result = detail::make_result<T>({1}, {total}, "sum");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so] {
      T* dx = detail::grad_buffer(sx.get());
      const T g = so->grad[0];
      for (std::size_t i = 0; i < sx->data.size(); ++i) dx[i] += g;
    }, "sum");
  }
  return result;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "dot");
  return sum(mul(a, b));
}

/// Row-wise numerically stable softmax of a matrix.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T* o = out.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "softmax_rows");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so, m, n] {
      T* dx = detail::grad_buffer(sx.get());
      const T* dy = so->grad.data();
      const T* p = so->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        T inner = T(0);
        for (std::size_t j = 0; j < n; ++j) inner += dy[i * n + j] * p[i * n + j];
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += p[i * n + j] * (dy[i * n + j] - inner);
      }
    }, "softmax_rows");
  }
  return result;
}

/// Mean over rows of -log softmax(logits[i])[targets[i]], via log-sum-exp.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require_rank2(logits.shape(), "cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) throw ShapeError("cross_entropy: one target per row required");
  std::vector<T> probs(m * n);
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw IndexError("cross_entropy: target out of range");
    const T* row = logits.data().data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  Tensor<T> result =
      detail::make_result<T>({1}, {total / static_cast<T>(m)}, "cross_entropy");
  if (auto* tape = detail::recording_tape(logits)) {
    auto sx = logits.shared_storage(), so = result.shared_storage();
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    tape->record(so, {sx}, [sx, so, m, n, probs = std::move(probs), tgt = std::move(tgt)] {
      T* dx = detail::grad_buffer(sx.get());
      const T g = so->grad[0] / static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g * probs[i * n + j];
        dx[i * n + tgt[i]] -= g;
      }
    }, "cross_entropy");
  }
  return result;
}

/// y = x / sqrt(mean(x^2) + eps) * gain, per row.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  detail::require_rank2(x.shape(), "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n) throw ShapeError("rms_norm: gain length does not match columns");
  std::vector<T> out(m * n), inv_rms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T ss = T(0);
    for (std::size_t j = 0; j < n; ++j) ss += row[j] * row[j];
    inv_rms[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] * inv_rms[i] * gain[j];
  }
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "rms_norm");
  if (auto* tape = detail::recording_tape(x, gain)) {
    auto sx = x.shared_storage(), sg = gain.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx, sg}, [sx, sg, so, m, n, inv_rms = std::move(inv_rms)] {
      T* dx = detail::grad_buffer(sx.get());
      T* dg = detail::grad_buffer(sg.get());
      const T* dy = so->grad.data();
      const T* xd = sx->data.data();
      const T* g = sg->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const T r = inv_rms[i];
        T inner = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          const T xhat = xd[i * n + j] * r;
          if (dg) dg[j] += dy[i * n + j] * xhat;
          inner += dy[i * n + j] * g[j] * xhat;
        }
        if (!dx) continue;
        inner /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const T xhat = xd[i * n + j] * r;
          dx[i * n + j] += r * (dy[i * n + j] * g[j] - xhat * inner);
        }
      }
    }, "rms_norm");
  }
  return result;
}

/// Rows of table[vocab, d] selected by ids.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_rank2(table.shape(), "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1), t = ids.size();
  if (t == 0) throw LengthError("embedding: empty id sequence");
  std::vector<T> out(t * d);
  for (std::size_t i = 0; i < t; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw VocabError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Tensor<T> result = detail::make_result<T>({t, d}, std::move(out), "embedding");
  if (auto* tape = detail::recording_tape(table)) {
    auto st = table.shared_storage(), so = result.shared_storage();
    std::vector<int> idv(ids.begin(), ids.end());
    tape->record(so, {st}, [st, so, d, idv = std::move(idv)] {
      T* dt = detail::grad_buffer(st.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = dt + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += dy[i * d + j];
      }
    }, "embedding");
  }
  return result;
}

namespace detail {

// Rotation angles for interleaved pairs (2i, 2i+1) of each head.
template <class T>
void rope_tables(std::size_t t, std::size_t d_head, double theta, std::vector<T>& cosv,
                 std::vector<T>& sinv) {
  const std::size_t half = d_head / 2;
  cosv.resize(t * half);
  sinv.resize(t * half);
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
      const double ang = static_cast<double>(pos) * freq;
      cosv[pos * half + i] = static_cast<T>(std::cos(ang));
      sinv[pos * half + i] = static_cast<T>(std::sin(ang));
    }
  }
}

}  // namespace detail

/// Rotary position embedding on X[T, n_heads * d_head]; row t has position t.
template <class T>
Tensor<T> rope(const Tensor<T>& x, std::size_t n_heads, double theta) {
  detail::require_rank2(x.shape(), "rope");
  const std::size_t t = x.dim(0), d = x.dim(1);
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw ShapeError("rope: head dimension must be even and divide the width");
  }
  const std::size_t dh = d / n_heads, half = dh / 2;
  std::vector<T> cosv, sinv;
  detail::rope_tables(t, dh, theta, cosv, sinv);
  std::vector<T> out(t * d);
  const T* px = x.data().data();
  for (std::size_t pos = 0; pos < t; ++pos)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = pos * d + h * dh + 2 * i;
        const T c = cosv[pos * half + i], s = sinv[pos * half + i];
        out[j] = px[j] * c - px[j + 1] * s;
        out[j + 1] = px[j] * s + px[j + 1] * c;
      }
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "rope");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so, t, d, dh, half, n_heads, cosv = std::move(cosv),
                            sinv = std::move(sinv)] {
      T* dx = detail::grad_buffer(sx.get());
      const T* dy = so->grad.data();
      for (std::size_t pos = 0; pos < t; ++pos)
        for (std::size_t h = 0; h < n_heads; ++h)
          for (std::size_t i = 0; i < half; ++i) {
            const std::size_t j = pos * d + h * dh + 2 * i;
            const T c = cosv[pos * half + i], s = sinv[pos * half + i];
            dx[j] += dy[j] * c + dy[j + 1] * s;
            dx[j + 1] += -dy[j] * s + dy[j + 1] * c;
          }
    }, "rope");
  }
  return result;
}

/// silu(gate) * up, elementwise.
template <class T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up) {
  return detail::binary_elementwise(
      gate, up,
      [](T g, T u) { return g / (T(1) + std::exp(-g)) * u; },
      [](T g, T u, T dy) {
        const T sig = T(1) / (T(1) + std::exp(-g));
        const T silu = g * sig;
        return std::pair<T, T>{dy * u * (sig + silu * (T(1) - sig)), dy * silu};
      },
      "swiglu");
}

/// Inverted dropout: kept values are scaled by 1/(1-p). p == 0 returns x.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, CounterRng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const std::size_t n = x.numel();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * mask[i];
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "dropout");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so, n, mask = std::move(mask)] {
      T* dx = detail::grad_buffer(sx.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * mask[i];
    }, "dropout");
  }
  return result;
}

/// Multi-head scaled dot-product attention over Q, K, V of shape [T, d].
/// Per head: softmax(mask + Q K^T / sqrt(d_head)) V, where mask holds 0 for
/// allowed pairs and kMaskedLogit otherwise. Dropout, when p > 0, applies to
/// the attention probabilities. If `probs_out` is non-null it receives the
/// pre-dropout probabilities laid out [head][query][key].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t n_heads, AttentionMode mode, double dropout_p = 0.0,
                    CounterRng* rng = nullptr, std::vector<T>* probs_out = nullptr) {
  detail::require_rank2(q.shape(), "attention");
  detail::require_same_shape(q.shape(), k.shape(), "attention");
  detail::require_same_shape(q.shape(), v.shape(), "attention");
  const std::size_t t = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: heads must divide width");
  if (dropout_p > 0.0 && rng == nullptr) throw ConfigError("attention dropout requires an rng");
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T masked = static_cast<T>(kMaskedLogit);
  const bool use_dropout = dropout_p > 0.0;
  const T keep_scale = use_dropout ? static_cast<T>(1.0 / (1.0 - dropout_p)) : T(1);

  std::vector<T> probs(n_heads * t * t);
  std::vector<T> drop(use_dropout ? n_heads * t * t : 0);
  std::vector<T> out(t * d, T(0));
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  std::vector<T> scores(t);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        T s = T(0);
        for (std::size_t c = 0; c < dh; ++c) s += pq[i * d + off + c] * pk[j * d + off + c];
        s *= inv_sqrt;
        if (mode == AttentionMode::Causal && j > i) s += masked;
        scores[j] = s;
      }
      const T mx = *std::max_element(scores.begin(), scores.end());
      T z = T(0);
      T* p = probs.data() + (h * t + i) * t;
      for (std::size_t j = 0; j < t; ++j) {
        p[j] = std::exp(scores[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < t; ++j) p[j] /= z;
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < t; ++j) {
        T w = p[j];
        if (use_dropout) {
          const T m = rng->uniform() < dropout_p ? T(0) : keep_scale;
          drop[(h * t + i) * t + j] = m;
          w *= m;
        }
        const T* vr = pv + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) o[c] += w * vr[c];
      }
    }
  }
  if (probs_out) *probs_out = probs;
  Tensor<T> result = detail::make_result<T>({t, d}, std::move(out), "attention");
  if (auto* tape = detail::recording_tape(q, k, v)) {
    auto sq = q.shared_storage(), sk = k.shared_storage(), sv = v.shared_storage();
    auto so = result.shared_storage();
    tape->record(so, {sq, sk, sv}, [sq, sk, sv, so, t, d, dh, n_heads, inv_sqrt, use_dropout,
                                    probs = std::move(probs), drop = std::move(drop)] {
      T* dq = detail::grad_buffer(sq.get());
      T* dk = detail::grad_buffer(sk.get());
      T* dv = detail::grad_buffer(sv.get());
      const T* dy = so->grad.data();
      const T* pq = sq->data.data();
      const T* pk = sk->data.data();
      const T* pv = sv->data.data();
      std::vector<T> dp(t), ds(t);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < t; ++i) {
          const T* p = probs.data() + (h * t + i) * t;
          const T* dyr = dy + i * d + off;
          for (std::size_t j = 0; j < t; ++j) {
            const T m = use_dropout ? drop[(h * t + i) * t + j] : T(1);
            const T* vr = pv + j * d + off;
            T g = T(0);
            for (std::size_t c = 0; c < dh; ++c) g += dyr[c] * vr[c];
            dp[j] = g * m;
            if (dv) {
              const T w = p[j] * m;
              T* dvr = dv + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) dvr[c] += w * dyr[c];
            }
          }
          T inner = T(0);
          for (std::size_t j = 0; j < t; ++j) inner += dp[j] * p[j];
          for (std::size_t j = 0; j < t; ++j) ds[j] = p[j] * (dp[j] - inner) * inv_sqrt;
          for (std::size_t j = 0; j < t; ++j) {
            if (ds[j] == T(0)) continue;
            if (dq) {
              const T* kr = pk + j * d + off;
              T* dqr = dq + i * d + off;
              for (std::size_t c = 0; c < dh; ++c) dqr[c] += ds[j] * kr[c];
            }
            if (dk) {
              const T* qr = pq + i * d + off;
              T* dkr = dk + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) dkr[c] += ds[j] * qr[c];
            }
          }
        }
      }
    }, "attention");
  }
  return result;
}

/// Rows of X[m, d] at `index` (repeats allowed).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  detail::require_rank2(x.shape(), "gather_rows");
  const std::size_t m = x.dim(0), d = x.dim(1), n = index.size();
  if (n == 0) throw ShapeError("gather_rows: empty index");
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) throw IndexError("gather_rows: row index out of range");
    std::copy_n(x.data().data() + index[i] * d, d, out.data() + i * d);
  }
  Tensor<T> result = detail::make_result<T>({n, d}, std::move(out), "gather_rows");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape->record(so, {sx}, [sx, so, d, idx = std::move(idx)] {
      T* dx = detail::grad_buffer(sx.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dx[idx[i] * d + j] += dy[i * d + j];
    }, "gather_rows");
  }
  return result;
}

/// Vertical concatenation of matrices (or vectors, treated as one row) with
/// equal column counts.
template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> result = detail::make_result<T>({total, d}, std::move(out), "concat_rows");
  Tape<T>* tape = Tape<T>::active();
  const bool any = std::any_of(parts.begin(), parts.end(),
                               [](const Tensor<T>& p) { return p.requires_grad(); });
  if (tape && any) {
    std::vector<detail::StoragePtr<T>> ins;
    for (const auto& p : parts) ins.push_back(p.shared_storage());
    auto so = result.shared_storage();
    tape->record(so, ins, [ins, so] {
      std::size_t offset = 0;
      for (const auto& s : ins) {
        const std::size_t n = s->data.size();
        if (T* dx = detail::grad_buffer(s.get()))
          for (std::size_t i = 0; i < n; ++i) dx[i] += so->grad[offset + i];
        offset += n;
      }
    }, "concat_rows");
  }
  return result;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  return concat_rows(std::span<const Tensor<T>>(parts));
}

/// sum_t weights[t] * X[t, :] as a [1, d] row. Weights are constants.
template <class T>
Tensor<T> weighted_row_sum(const Tensor<T>& x, std::span<const T> weights) {
  detail::require_rank2(x.shape(), "weighted_row_sum");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (weights.size() != m) throw ShapeError("weighted_row_sum: one weight per row required");
  std::vector<T> out(d, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    if (weights[i] == T(0)) continue;
    for (std::size_t j = 0; j < d; ++j) out[j] += weights[i] * x.data()[i * d + j];
  }
  Tensor<T> result = detail::make_result<T>({1, d}, std::move(out), "weighted_row_sum");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    std::vector<T> w(weights.begin(), weights.end());
    tape->record(so, {sx}, [sx, so, m, d, w = std::move(w)] {
      T* dx = detail::grad_buffer(sx.get());
      const T* dy = so->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += w[i] * dy[j];
    }, "weighted_row_sum");
  }
  return result;
}

/// Multiplies row i of X by keep[i] ? 1 : 0.
template <class T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<bool>& keep) {
  detail::require_rank2(x.shape(), "mask_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (keep.size() != m) throw ShapeError("mask_rows: one flag per row required");
  std::vector<T> w(m);
  for (std::size_t i = 0; i < m; ++i) w[i] = keep[i] ? T(1) : T(0);
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    if (!keep[i]) std::fill_n(out.data() + i * d, d, T(0));
  Tensor<T> result = detail::make_result<T>(x.shape(), std::move(out), "mask_rows");
  if (auto* tape = detail::recording_tape(x)) {
    auto sx = x.shared_storage(), so = result.shared_storage();
    tape->record(so, {sx}, [sx, so, m, d, w = std::move(w)] {
      T* dx = detail::grad_buffer(sx.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += w[i] * so->grad[i * d + j];
    }, "mask_rows");
  }
  return result;
}

namespace detail {

template <class T>
double norm_sq(const T* v, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  return s;
}

template <class T>
double dot_d(const T* a, const T* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace detail

/// S[i, j] = cos(A[i], B[j]) for A[n, d], B[m, d]. Reductions run in double.
template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "cosine_matrix");
  detail::require_rank2(b.shape(), "cosine_matrix");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw ShapeError("cosine_matrix: widths differ");
  std::vector<double> na(n), nb(m);
  for (std::size_t i = 0; i < n; ++i) na[i] = std::sqrt(detail::norm_sq(a.data().data() + i * d, d));
  for (std::size_t j = 0; j < m; ++j) nb[j] = std::sqrt(detail::norm_sq(b.data().data() + j * d, d));
  for (double v : na) if (v == 0.0) throw DegenerateVectorError("cosine of an all-zero vector");
  for (double v : nb) if (v == 0.0) throw DegenerateVectorError("cosine of an all-zero vector");
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double c = detail::dot_d(a.data().data() + i * d, b.data().data() + j * d, d) /
                       (na[i] * nb[j]);
      out[i * m + j] = static_cast<T>(std::clamp(c, -1.0, 1.0));
    }
  Tensor<T> result = detail::make_result<T>({n, m}, std::move(out), "cosine_matrix");
  if (auto* tape = detail::recording_tape(a, b)) {
    auto sa = a.shared_storage(), sb = b.shared_storage(), so = result.shared_storage();
    tape->record(so, {sa, sb}, [sa, sb, so, n, m, d, na = std::move(na), nb = std::move(nb)] {
      const T* dy = so->grad.data();
      const T* pa = sa->data.data();
      const T* pb = sb->data.data();
      // d cos(a,b) / da = b/(|a||b|) - cos * a/|a|^2
      if (T* da = detail::grad_buffer(sa.get())) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double g = static_cast<double>(dy[i * m + j]);
            if (g == 0.0) continue;
            const double c = static_cast<double>(so->data[i * m + j]);
            for (std::size_t k = 0; k < d; ++k)
              da[i * d + k] += static_cast<T>(g * (pb[j * d + k] / (na[i] * nb[j]) -
                                                   c * pa[i * d + k] / (na[i] * na[i])));
          }
      }
      if (T* db = detail::grad_buffer(sb.get())) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double g = static_cast<double>(dy[i * m + j]);
            if (g == 0.0) continue;
            const double c = static_cast<double>(so->data[i * m + j]);
            for (std::size_t k = 0; k < d; ++k)
              db[j * d + k] += static_cast<T>(g * (pa[i * d + k] / (na[i] * nb[j]) -
                                                   c * pb[j * d + k] / (nb[j] * nb[j])));
          }
      }
    }, "cosine_matrix");
  }
  return result;
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) throw ShapeError("cosine_similarity: lengths differ");
  return reshape(cosine_matrix(reshape(a, {1, a.numel()}), reshape(b, {1, b.numel()})), {1});
}

/// Plain-value cosine similarity with double accumulation. For identical
/// inputs the result is exactly 1.
template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: lengths differ");
  const double na = detail::norm_sq(a.data(), a.size());
  const double nb = detail::norm_sq(b.data(), b.size());
  if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("cosine of an all-zero vector");
  const double c = detail::dot_d(a.data(), b.data(), a.size()) / std::sqrt(na * nb);
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace l2v
