#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "iprls/ownership.hpp"
#include "iprls/tensor.hpp"

namespace iprls {

struct AdamHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers keyed by parameter name, plus the shared step.
template <class T>
struct OptimizerState {
  struct Moments {
    Tensor<T> m, v;
  };
  std::map<std::string, Moments> buffers;
  std::int64_t step = 0;

  void reset() {
    buffers.clear();
    step = 0;
  }
};

/// Adam with decoupled weight decay on one parameter tensor. Call
/// `state.step += 1` once per optimizer step before updating its parameters.
/// Entries with trainable[i] == 0 are left untouched (value and moments).
template <class T>
void adam_decoupled_step(Tensor<T>& param, const Tensor<T>& grad, OptimizerState<T>& state, const std::string& name,
                         const AdamHyper& h, const ByteMask* trainable = nullptr) {
  require_same_shape(param, grad, "adam_decoupled_step");
  if (trainable && trainable->size() != param.size()) throw ShapeError("adam_decoupled_step: mask size mismatch");
  if (state.step < 1) throw std::logic_error("adam_decoupled_step: optimizer step counter not advanced");
  auto [it, inserted] = state.buffers.try_emplace(name);
  auto& mom = it->second;
  if (inserted) {
    mom.m = Tensor<T>(param.shape());
    mom.v = Tensor<T>(param.shape());
  }
  require_same_shape(param, mom.m, "adam_decoupled_step state");
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (trainable && !(*trainable)[i]) continue;
    const T g = grad[i];
    mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
    mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
    const double mhat = mom.m[i] / bc1;
    const double vhat = mom.v[i] / bc2;
    double p = param[i];
    p -= h.lr * h.weight_decay * p;
    p -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    param[i] = static_cast<T>(p);
  }
}

}  // namespace iprls
