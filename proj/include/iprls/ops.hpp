#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "iprls/tape.hpp"
#include "iprls/tensor.hpp"

namespace iprls::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// One contiguous run of rows belonging to a single sequence in a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

namespace detail {

template <class T>
bool wants(Tape<T>& t, Var v) {
  return t.needs_grad(v);
}

template <class T, class F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <class T>
void check_finite(const Tensor<T>& x, const char* what) {
  for (T v : x.data()) {
    if (std::isnan(v)) throw std::domain_error(std::string(what) + ": NaN input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pure tensor kernels (no tape)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " . " + to_string(b.shape()));
  }
  Tensor<T> out(Shape{a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

/// a . b^T, the layout used by every linear transform (weights are out x in).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + to_string(a.shape()) + " . " +
                     to_string(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

/// Softmax along `axis` with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  detail::check_finite(x, "softmax");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  return out;
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  Tensor<T> out = matmul(t.value(a), t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto g = as_matrix(t.grad_of(self));
    if (t.needs_grad(a)) as_matrix(t.grad_buffer(a)).noalias() += g * as_matrix(t.value(b)).transpose();
    if (t.needs_grad(b)) as_matrix(t.grad_buffer(b)).noalias() += as_matrix(t.value(a)).transpose() * g;
  });
}

template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  Tensor<T> out = matmul_nt(t.value(a), t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto g = as_matrix(t.grad_of(self));
    if (t.needs_grad(a)) as_matrix(t.grad_buffer(a)).noalias() += g * as_matrix(t.value(b));
    if (t.needs_grad(b)) as_matrix(t.grad_buffer(b)).noalias() += g.transpose() * as_matrix(t.value(a));
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  require_same_shape(va, vb, "add");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    for (Var v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      auto& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  require_same_shape(va, vb, "sub");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  require_same_shape(va, vb, "mul");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a);
      const auto& vb = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_buffer(b);
      const auto& va = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Tensor<T> out = detail::map_unary(t.value(a), [s](T x) { return x * s; });
  return t.record(std::move(out), {a}, [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

/// Adds a length-n vector to every row of an m x n matrix.
template <class T>
Var add_row(Tape<T>& t, Var a, Var row) {
  const auto& va = t.value(a);
  const auto& vr = t.value(row);
  if (vr.size() != va.cols()) {
    throw ShapeError("add_row: row length " + std::to_string(vr.size()) + " vs matrix " + to_string(va.shape()));
  }
  Tensor<T> out = va;
  const std::size_t n = va.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vr[i % n];
  return t.record(std::move(out), {a, row}, [a, row](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(row)) {
      auto& gr = t.grad_buffer(row);
      const std::size_t n = gr.size();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % n] += g[i];
    }
  });
}

template <class T>
Var square(Tape<T>& t, Var a) {
  Tensor<T> out = detail::map_unary(t.value(a), [](T x) { return x * x; });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& va = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * va[i] * g[i];
  });
}

/// |x| with subgradient 0 at x == 0.
template <class T>
Var abs(Tape<T>& t, Var a) {
  Tensor<T> out = detail::map_unary(t.value(a), [](T x) { return std::abs(x); });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& va = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = va[i] > T(0) ? T(1) : (va[i] < T(0) ? T(-1) : T(0));
      ga[i] += s * g[i];
    }
  });
}

template <class T>
Var exp(Tape<T>& t, Var a) {
  Tensor<T> out = detail::map_unary(t.value(a), [](T x) { return std::exp(x); });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& y = t.value(Var{self});
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

template <class T>
Var log(Tape<T>& t, Var a) {
  const auto& va = t.value(a);
  for (T x : va.data()) {
    if (!(x > T(0))) throw std::domain_error("log: non-positive input");
  }
  Tensor<T> out = detail::map_unary(va, [](T x) { return std::log(x); });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& va = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / va[i];
  });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  Tensor<T> out = detail::map_unary(t.value(a), [](T x) { return x > T(0) ? x : T(0); });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& va = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += va[i] > T(0) ? g[i] : T(0);
  });
}

template <class T>
Var gelu(Tape<T>& t, Var a) {
  Tensor<T> out = detail::map_unary(t.value(a), [](T x) { return gelu_value(x); });
  return t.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& va = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(va[i]);
  });
}

/// Sum of all elements, as a scalar.
template <class T>
Var sum(Tape<T>& t, Var a) {
  double acc = 0.0;
  for (T x : t.value(a).data()) acc += x;
  return t.record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0];
    auto& ga = t.grad_buffer(a);
    for (auto& x : ga.data()) x += g;
  });
}

/// Weighted sum: sum_i w_i * a_i, with w a constant tensor of a's shape.
template <class T>
Var weighted_sum(Tape<T>& t, Var a, const Tensor<T>& weights) {
  require_same_shape(t.value(a), weights, "weighted_sum");
  double acc = 0.0;
  const auto& va = t.value(a);
  for (std::size_t i = 0; i < va.size(); ++i) acc += static_cast<double>(weights[i]) * va[i];
  auto w = std::make_shared<const Tensor<T>>(weights);
  return t.record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a, w](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0];
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (*w)[i];
  });
}

/// Differentiable softmax along `axis`.
template <class T>
Var softmax(Tape<T>& t, Var x, std::size_t axis) {
  Tensor<T> out = softmax(t.value(x), axis);
  return t.record(std::move(out), {x}, [x, axis](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& y = t.value(Var{self});
    const auto& s = y.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    auto& gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          gx[k] += y[k] * (g[k] - static_cast<T>(dot));
        }
      }
    }
  });
}

/// Layer normalization over the last axis with population variance:
/// y = gain * (x - mean) / sqrt(var + eps) + bias.
template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const auto& vx = t.value(x);
  const auto& vg = t.value(gain);
  const auto& vb = t.value(bias);
  const std::size_t n = vx.cols();
  const std::size_t m = vx.size() / n;
  if (vg.size() != n || vb.size() != n) throw ShapeError("layer_norm: gain/bias length must match last axis");
  if (eps < T(0)) throw std::invalid_argument("layer_norm: eps must be non-negative");
  Tensor<T> out(vx.shape());
  auto xhat = std::make_shared<std::vector<T>>(vx.size());
  auto inv_std = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = vx.raw() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double denom = var + static_cast<double>(eps);
    const T inv = denom > 0.0 ? static_cast<T>(1.0 / std::sqrt(denom)) : T(0);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>((row[j] - mean)) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = vg[j] * h + vb[j];
    }
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat, inv_std, n, m](Tape<T>& t, std::size_t self) {
                    const auto& g = t.grad_of(self);
                    const auto& vg = t.value(gain);
                    if (t.needs_grad(gain)) {
                      auto& gg = t.grad_buffer(gain);
                      for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * (*xhat)[i];
                    }
                    if (t.needs_grad(bias)) {
                      auto& gb = t.grad_buffer(bias);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                    }
                    if (!t.needs_grad(x)) return;
                    auto& gx = t.grad_buffer(x);
                    for (std::size_t r = 0; r < m; ++r) {
                      double mean_d = 0.0, mean_dh = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double d = static_cast<double>(g[r * n + j]) * vg[j];
                        mean_d += d;
                        mean_dh += d * (*xhat)[r * n + j];
                      }
                      mean_d /= static_cast<double>(n);
                      mean_dh /= static_cast<double>(n);
                      const T inv = (*inv_std)[r];
                      for (std::size_t j = 0; j < n; ++j) {
                        const double d = static_cast<double>(g[r * n + j]) * vg[j];
                        gx[r * n + j] += inv * static_cast<T>(d - mean_d - (*xhat)[r * n + j] * mean_dh);
                      }
                    }
                  });
}

/// Scaled dot-product attention over packed sequences. q, k, v are N x d with
/// heads laid out as consecutive column blocks of width d / n_heads; each
/// segment attends only within itself. Output is N x d (heads concatenated).
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::size_t n_heads, std::vector<Segment> segments, T scale) {
  const auto& vq = t.value(q);
  const auto& vk = t.value(k);
  const auto& vv = t.value(v);
  require_same_shape(vq, vk, "attention");
  require_same_shape(vq, vv, "attention");
  const std::size_t d = vq.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: width not divisible by head count");
  const std::size_t dh = d / n_heads;
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.length == 0 || s.offset != covered) throw ShapeError("attention: segments must tile the rows");
    covered += s.length;
  }
  if (covered != vq.rows()) throw ShapeError("attention: segments do not cover all rows");

  Tensor<T> out(vq.shape());
  // Attention probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat<T>>>();
  probs->reserve(segments.size() * n_heads);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  for (const auto& s : segments) {
    const auto len = static_cast<Eigen::Index>(s.length);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base = s.offset * d + h * dh;
      ConstStridedMap<T> Q(vq.raw() + base, len, dh, stride);
      ConstStridedMap<T> K(vk.raw() + base, len, dh, stride);
      ConstStridedMap<T> V(vv.raw() + base, len, dh, stride);
      RowMat<T> S = (Q * K.transpose()) * scale;
      for (Eigen::Index r = 0; r < len; ++r) {
        const T mx = S.row(r).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index c = 0; c < len; ++c) {
          S(r, c) = std::exp(S(r, c) - mx);
          sum += S(r, c);
        }
        S.row(r) *= static_cast<T>(1.0 / sum);
      }
      StridedMap<T> O(out.raw() + base, len, dh, stride);
      O.noalias() = S * V;
      probs->push_back(std::move(S));
    }
  }
  auto segs = std::make_shared<const std::vector<Segment>>(std::move(segments));
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, n_heads, segs, probs, scale, d, dh](Tape<T>& t, std::size_t self) {
                    const auto& g = t.grad_of(self);
                    const auto& vq = t.value(q);
                    const auto& vk = t.value(k);
                    const auto& vv = t.value(v);
                    const bool wq = t.needs_grad(q), wk = t.needs_grad(k), wv = t.needs_grad(v);
                    T* gq = wq ? t.grad_buffer(q).raw() : nullptr;
                    T* gk = wk ? t.grad_buffer(k).raw() : nullptr;
                    T* gv = wv ? t.grad_buffer(v).raw() : nullptr;
                    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                    std::size_t p = 0;
                    for (const auto& s : *segs) {
                      const auto len = static_cast<Eigen::Index>(s.length);
                      for (std::size_t h = 0; h < n_heads; ++h, ++p) {
                        const std::size_t base = s.offset * d + h * dh;
                        const RowMat<T>& P = (*probs)[p];
                        ConstStridedMap<T> G(g.raw() + base, len, dh, stride);
                        ConstStridedMap<T> V(vv.raw() + base, len, dh, stride);
                        if (wv) StridedMap<T>(gv + base, len, dh, stride).noalias() += P.transpose() * G;
                        if (!wq && !wk) continue;
                        RowMat<T> dP = G * V.transpose();
                        RowMat<T> dS(len, len);
                        for (Eigen::Index r = 0; r < len; ++r) {
                          double dot = 0.0;
                          for (Eigen::Index c = 0; c < len; ++c) dot += static_cast<double>(dP(r, c)) * P(r, c);
                          for (Eigen::Index c = 0; c < len; ++c) dS(r, c) = P(r, c) * (dP(r, c) - static_cast<T>(dot)) * scale;
                        }
                        ConstStridedMap<T> Q(vq.raw() + base, len, dh, stride);
                        ConstStridedMap<T> K(vk.raw() + base, len, dh, stride);
                        if (wq) StridedMap<T>(gq + base, len, dh, stride).noalias() += dS * K;
                        if (wk) StridedMap<T>(gk + base, len, dh, stride).noalias() += dS.transpose() * Q;
                      }
                    }
                  });
}

/// Selects rows of a matrix (e.g. the first-token state of each sequence).
template <class T>
Var gather_rows(Tape<T>& t, Var x, std::vector<std::size_t> rows) {
  const auto& vx = t.value(x);
  const std::size_t n = vx.cols();
  Tensor<T> out(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= vx.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(vx.raw() + rows[r] * n, n, out.raw() + r * n);
  }
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
  return t.record(std::move(out), {x}, [x, idx, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    auto& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) gx[(*idx)[r] * n + j] += g[r * n + j];
    }
  });
}

/// Mean negative log-likelihood of integer labels under row-wise softmax.
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, std::vector<int> labels) {
  const auto& z = t.value(logits);
  require_rank(z, 2, "cross_entropy");
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b) throw ShapeError("cross_entropy: label count does not match batch");
  Tensor<T> probs = softmax(z, 1);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw std::out_of_range("cross_entropy: label out of range");
    // log-sum-exp for the loss itself; probs only feed the gradient.
    const T* row = z.raw() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(s) + mx - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  auto p = std::make_shared<const Tensor<T>>(std::move(probs));
  auto y = std::make_shared<const std::vector<int>>(std::move(labels));
  return t.record(Tensor<T>::scalar(static_cast<T>(loss)), {logits}, [logits, p, y, b, c](Tape<T>& t, std::size_t self) {
    const T g = t.grad_of(self)[0] / static_cast<T>(b);
    auto& gz = t.grad_buffer(logits);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const T target = static_cast<int>(j) == (*y)[i] ? T(1) : T(0);
        gz[i * c + j] += g * ((*p)[i * c + j] - target);
      }
    }
  });
}

/// Mean-field weight sample W = keep ? (phi + noise * exp(rho_row)) : 0.
/// `noise` holds upsilon * tau for stochastic entries and 0 elsewhere; pass an
/// empty pointer for the deterministic (mean) weights. `keep` is the binary
/// inference mask; masked entries are exactly +0 regardless of phi.
template <class T>
Var mean_field_weight(Tape<T>& t, Var phi, Var rho, std::shared_ptr<const std::vector<std::uint8_t>> keep,
                      std::shared_ptr<const Tensor<T>> noise) {
  const auto& vp = t.value(phi);
  const auto& vr = t.value(rho);
  require_rank(vp, 2, "mean_field_weight");
  const std::size_t rows = vp.rows(), cols = vp.cols();
  if (vr.size() != rows) throw ShapeError("mean_field_weight: rho length must equal output rows");
  if (keep && keep->size() != vp.size()) throw ShapeError("mean_field_weight: mask size mismatch");
  if (noise) require_same_shape(*noise, vp, "mean_field_weight noise");
  Tensor<T> out(vp.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T sigma = noise ? std::exp(vr[r]) : T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (keep && !(*keep)[i]) continue;
      out[i] = noise ? vp[i] + (*noise)[i] * sigma : vp[i];
    }
  }
  return t.record(std::move(out), {phi, rho}, [phi, rho, keep, noise, rows, cols](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.needs_grad(phi)) {
      auto& gp = t.grad_buffer(phi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!keep || (*keep)[i]) gp[i] += g[i];
      }
    }
    if (noise && t.needs_grad(rho)) {
      const auto& vr = t.value(rho);
      auto& gr = t.grad_buffer(rho);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          if (keep && !(*keep)[i]) continue;
          acc += static_cast<double>(g[i]) * (*noise)[i];
        }
        gr[r] += static_cast<T>(acc) * std::exp(vr[r]);
      }
    }
  });
}

// Convenience wrappers over the tape ops.

template <class T>
Var linear(Tape<T>& t, Var x, Var weight) {
  return matmul_nt(t, x, weight);
}

template <class T>
Var linear(Tape<T>& t, Var x, Var weight, Var bias) {
  return add_row(t, matmul_nt(t, x, weight), bias);
}

}  // namespace iprls::ops
