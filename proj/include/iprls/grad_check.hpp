#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "iprls/tape.hpp"
#include "iprls/tensor.hpp"

namespace iprls {

/// Builds a scalar loss on a tape from a single differentiable input.
template <class T>
using ScalarFn = std::function<Var(Tape<T>&, Var)>;

/// Result of comparing reverse-mode gradients to central differences.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Max over elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
/// numeric from central differences with the given step.
template <class T>
GradCheckResult grad_check_detailed(const ScalarFn<T>& f, const Tensor<T>& x, T step = T(1e-3)) {
  Tensor<T> analytic;
  {
    Tape<T> tape;
    Var in = tape.leaf(x);
    Var loss = f(tape, in);
    tape.backward(loss);
    analytic = tape.grad(in);
  }
  auto eval = [&](const Tensor<T>& point) {
    Tape<T> tape;
    Var in = tape.leaf(point);
    return static_cast<double>(tape.value(f(tape, in)).item());
  };
  GradCheckResult result;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * static_cast<double>(step));
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (i == 0 || err > result.max_rel_error) result = GradCheckResult{err, i, a, numeric};
  }
  return result;
}

template <class T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T step = T(1e-3)) {
  return grad_check_detailed(f, x, step).max_rel_error;
}

}  // namespace iprls
