#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iprls/config.hpp"
#include "iprls/ops.hpp"
#include "iprls/tape.hpp"
#include "iprls/tensor.hpp"

namespace iprls {

/// Raised when a regularizer is evaluated before any task snapshot exists.
class MissingSnapshot : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// A linear transform stored as mean weights plus a per-output-node
/// log-deviation. sigma = exp(rho) is broadcast along the input dimension.
template <class T>
struct MeanFieldMatrix {
  std::string name;
  Tensor<T> phi;  // d_out x d_in
  Tensor<T> rho;  // d_out
  std::optional<Tensor<T>> phi_prev;
  std::optional<Tensor<T>> sigma_prev;
  /// Encoder layer this transform lives in (selects sigma_init).
  std::size_t layer = 0;
  /// Index of the transform feeding this one's input, or -1 for the first.
  int lower = -1;

  MeanFieldMatrix() = default;
  MeanFieldMatrix(std::string n, Tensor<T> weights, T sigma_init, std::size_t layer_index = 0, int lower_index = -1)
      : name(std::move(n)),
        phi(std::move(weights)),
        rho(Shape{phi.rows()}, std::log(sigma_init)),
        layer(layer_index),
        lower(lower_index) {
    require_rank(phi, 2, "MeanFieldMatrix");
    if (!(sigma_init > T(0))) throw ConfigError("sigma_init must be positive");
  }

  std::size_t out_dim() const { return phi.rows(); }
  std::size_t in_dim() const { return phi.cols(); }
  T sigma(std::size_t row) const { return std::exp(rho[row]); }
  bool has_snapshot() const { return phi_prev.has_value(); }

  Tensor<T> sigma_vector() const {
    Tensor<T> s(rho.shape());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(rho[i]);
    return s;
  }

  const Tensor<T>& snapshot_phi() const {
    if (!phi_prev) throw MissingSnapshot(name + ": no previous-task snapshot");
    return *phi_prev;
  }
  const Tensor<T>& snapshot_sigma() const {
    if (!sigma_prev) throw MissingSnapshot(name + ": no previous-task snapshot");
    return *sigma_prev;
  }
};

/// Records the end-of-task reference values (Phi_k, sigma_k).
template <class T>
void snapshot_after_task(MeanFieldMatrix<T>& m) {
  m.phi_prev = m.phi;
  m.sigma_prev = m.sigma_vector();
}

enum class WeightMode { train, eval };

using ByteMask = std::vector<std::uint8_t>;

/// Noise coefficients upsilon * tau for the entries flagged in `noisy`
/// (previous-task owned), zero elsewhere. tau ~ N(0,1) elementwise.
template <class T, class Rng>
Tensor<T> sample_noise(const MeanFieldMatrix<T>& m, const ByteMask& noisy, T upsilon, Rng& rng) {
  if (noisy.size() != m.phi.size()) throw ShapeError(m.name + ": noise mask size mismatch");
  Tensor<T> out(m.phi.shape());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (noisy[i]) out[i] = upsilon * static_cast<T>(normal(rng));
  }
  return out;
}

/// W = Phi + upsilon * tau * sigma on `noisy` entries (train mode only), Phi
/// elsewhere, then the binary inference mask `keep`.
template <class T>
Tensor<T> effective_weights(const MeanFieldMatrix<T>& m, WeightMode mode, const ByteMask* keep,
                            const Tensor<T>* noise) {
  if (keep && keep->size() != m.phi.size()) throw ShapeError(m.name + ": owner map size mismatch");
  if (noise) require_same_shape(*noise, m.phi, "effective_weights");
  Tensor<T> out(m.phi.shape());
  const std::size_t cols = m.in_dim();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (keep && !(*keep)[i]) continue;
    out[i] = m.phi[i];
    if (mode == WeightMode::train && noise) out[i] += (*noise)[i] * m.sigma(i / cols);
  }
  return out;
}

/// Elementwise max{ sigma_init(l)/sigma_k(l)[row], sigma_init(l-1)/sigma_k(l-1)[col] }.
/// `lower_sigma_prev` may be null for the first regularized transform.
template <class T>
Tensor<T> reg1_strength(const MeanFieldMatrix<T>& m, T sigma_init, const Tensor<T>* lower_sigma_prev,
                        T lower_sigma_init) {
  const auto& sk = m.snapshot_sigma();
  const std::size_t rows = m.out_dim(), cols = m.in_dim();
  if (lower_sigma_prev && lower_sigma_prev->size() != cols) {
    throw ShapeError(m.name + ": lower-layer sigma length must equal input width");
  }
  Tensor<T> c(m.phi.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T upper = sigma_init / sk[r];
    for (std::size_t j = 0; j < cols; ++j) {
      c[r * cols + j] = lower_sigma_prev ? std::max(upper, lower_sigma_init / (*lower_sigma_prev)[j]) : upper;
    }
  }
  return c;
}

/// REG1 = || strength (.) (Phi - Phi_k) ||_2^2, restricted to `mask` entries when given.
template <class T>
Var reg1(Tape<T>& t, Var phi, const MeanFieldMatrix<T>& m, T sigma_init, const Tensor<T>* lower_sigma_prev,
         T lower_sigma_init, const ByteMask* mask = nullptr) {
  Tensor<T> w = reg1_strength(m, sigma_init, lower_sigma_prev, lower_sigma_init);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (mask && !(*mask)[i]) ? T(0) : w[i] * w[i];
  Var delta = ops::sub(t, phi, t.constant(m.snapshot_phi()));
  return ops::weighted_sum(t, ops::square(t, delta), w);
}

/// REG2 = sigma_init^2 * || (Phi_k / sigma_k)^2 (.) (Phi - Phi_k) ||_1.
template <class T>
Var reg2(Tape<T>& t, Var phi, const MeanFieldMatrix<T>& m, T sigma_init, const ByteMask* mask = nullptr) {
  const auto& pk = m.snapshot_phi();
  const auto& sk = m.snapshot_sigma();
  const std::size_t cols = m.in_dim();
  Tensor<T> w(m.phi.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    const T ratio = pk[i] / sk[i / cols];
    w[i] = sigma_init * sigma_init * ratio * ratio;
  }
  Var delta = ops::sub(t, phi, t.constant(pk));
  return ops::weighted_sum(t, ops::abs(t, delta), w);
}

/// REG3 = sum over output nodes of (sigma/sigma_k)^2 - log((sigma/sigma_k)^2),
/// written in terms of rho = log sigma.
template <class T>
Var reg3(Tape<T>& t, Var rho, const MeanFieldMatrix<T>& m) {
  const auto& sk = m.snapshot_sigma();
  Tensor<T> log_sk(sk.shape());
  for (std::size_t i = 0; i < sk.size(); ++i) log_sk[i] = std::log(sk[i]);
  Var z = ops::scale(t, ops::sub(t, rho, t.constant(std::move(log_sk))), T(2));  // log of squared ratio
  return ops::sum(t, ops::sub(t, ops::exp(t, z), z));
}

/// Tape inputs for one regularized transform.
struct MeanFieldVars {
  Var phi;
  Var rho;
};

/// L_REG = sum_l [ alpha/2 REG1 + beta REG2 + gamma/2 REG3 ] over the listed
/// transforms. masks[i], when non-null, restricts REG1/REG2 of transform i to
/// preserved entries. Returns an invalid Var when every weight is zero.
template <class T>
Var total_reg(Tape<T>& t, std::span<const MeanFieldMatrix<T>* const> layers, std::span<const MeanFieldVars> vars,
              const RegConfig& cfg, std::span<const ByteMask* const> masks = {}) {
  if (layers.size() != vars.size()) throw ShapeError("total_reg: layer/var count mismatch");
  Var total = t.constant(Tensor<T>::scalar(T(0)));
  if (cfg.alpha == 0 && cfg.beta == 0 && cfg.gamma == 0) return total;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& m = *layers[i];
    const ByteMask* mask = i < masks.size() ? masks[i] : nullptr;
    const T s_init = static_cast<T>(cfg.sigma_init_for(m.layer));
    if (cfg.alpha != 0) {
      const Tensor<T>* lower = nullptr;
      T lower_init = s_init;
      if (m.lower >= 0) {
        const auto lower_idx = static_cast<std::size_t>(m.lower);
        if (lower_idx >= layers.size()) throw ShapeError(m.name + ": lower transform index out of range");
        const auto& lm = *layers[lower_idx];
        lower = &lm.snapshot_sigma();
        lower_init = static_cast<T>(cfg.sigma_init_for(lm.layer));
      }
      Var r1 = reg1(t, vars[i].phi, m, s_init, lower, lower_init, mask);
      total = ops::add(t, total, ops::scale(t, r1, static_cast<T>(cfg.alpha / 2)));
    }
    if (cfg.beta != 0) {
      total = ops::add(t, total, ops::scale(t, reg2(t, vars[i].phi, m, s_init, mask), static_cast<T>(cfg.beta)));
    }
    if (cfg.gamma != 0) {
      total = ops::add(t, total, ops::scale(t, reg3(t, vars[i].rho, m), static_cast<T>(cfg.gamma / 2)));
    }
  }
  return total;
}

// Value-only conveniences.

template <class T>
T reg1_value(const MeanFieldMatrix<T>& m, T sigma_init, const Tensor<T>* lower_sigma_prev = nullptr,
             T lower_sigma_init = T(0)) {
  Tape<T> t;
  return t.value(reg1(t, t.constant(m.phi), m, sigma_init, lower_sigma_prev, lower_sigma_init)).item();
}

template <class T>
T reg2_value(const MeanFieldMatrix<T>& m, T sigma_init) {
  Tape<T> t;
  return t.value(reg2(t, t.constant(m.phi), m, sigma_init)).item();
}

template <class T>
T reg3_value(const MeanFieldMatrix<T>& m) {
  Tape<T> t;
  return t.value(reg3(t, t.constant(m.rho), m)).item();
}

template <class T>
T total_reg_value(std::span<const MeanFieldMatrix<T>* const> layers, const RegConfig& cfg) {
  Tape<T> t;
  std::vector<MeanFieldVars> vars;
  for (const auto* m : layers) vars.push_back({t.constant(m->phi), t.constant(m->rho)});
  return t.value(total_reg<T>(t, layers, vars, cfg)).item();
}

}  // namespace iprls
