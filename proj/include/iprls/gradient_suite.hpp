#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "iprls/encoder.hpp"
#include "iprls/engine.hpp"
#include "iprls/grad_check.hpp"
#include "iprls/meanfield.hpp"
#include "iprls/ops.hpp"

namespace iprls {

/// Outcome of one gradient-suite case: worst relative error over its inputs.
struct GradCase {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst_input;
  double seconds = 0.0;
};

struct GradSuiteResult {
  std::vector<GradCase> cases;
  double tolerance = 1e-3;

  bool passed() const {
    for (const auto& c : cases) {
      if (!(c.max_rel_error < tolerance)) return false;
    }
    return !cases.empty();
  }
  double seconds() const {
    double s = 0.0;
    for (const auto& c : cases) s += c.seconds;
    return s;
  }
};

namespace gradsuite {

using D = double;
using Builder = std::function<Var(Tape<D>&, std::vector<Var>&)>;

/// Checks d(loss)/d(input i) for every named input in turn, the others held
/// constant, and keeps the worst relative error.
inline GradCase check_inputs(std::string name, const std::vector<std::pair<std::string, Tensor<D>>>& inputs,
                             const Builder& build) {
  const auto start = std::chrono::steady_clock::now();
  GradCase c;
  c.name = std::move(name);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ScalarFn<D> f = [&](Tape<D>& t, Var x) {
      std::vector<Var> vars;
      for (std::size_t k = 0; k < inputs.size(); ++k) vars.push_back(k == i ? x : t.constant(inputs[k].second));
      return build(t, vars);
    };
    const double err = grad_check<D>(f, inputs[i].second, 1e-5);
    if (i == 0 || err > c.max_rel_error) {
      c.max_rel_error = err;
      c.worst_input = inputs[i].first;
    }
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return c;
}

/// A transform with a snapshot: Phi_k and sigma_k random, the live Phi offset
/// from Phi_k by at least 0.05 per entry so |Phi - Phi_k| is differentiable.
inline MeanFieldMatrix<D> snapshot_matrix(const std::string& name, std::size_t rows, std::size_t cols,
                                          std::mt19937_64& rng, int lower = -1) {
  MeanFieldMatrix<D> m(name, Tensor<D>::randn(Shape{rows, cols}, rng, 0.5), 0.05, 0, lower);
  std::uniform_real_distribution<double> log_sigma(std::log(0.02), std::log(0.2));
  for (std::size_t r = 0; r < rows; ++r) m.rho[r] = log_sigma(rng);
  snapshot_after_task(m);
  std::uniform_real_distribution<double> mag(0.05, 0.3);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t i = 0; i < m.phi.size(); ++i) m.phi[i] += sign(rng) ? mag(rng) : -mag(rng);
  for (std::size_t r = 0; r < rows; ++r) m.rho[r] += mag(rng) - 0.15;
  return m;
}

inline EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.max_len = 6;
  c.d_ff = 12;
  c.d_prf = 4;
  c.n_heads_prf = 2;
  c.vocab_size = 16;
  c.n_classes = 2;
  return c;
}

}  // namespace gradsuite

/// Double-precision gradient checks of the regularizers, layer norm,
/// attention, the full encoder layer, and the combined training objective.
inline GradSuiteResult run_gradient_suite(std::uint64_t seed = 1) {
  using namespace gradsuite;
  std::mt19937_64 rng(seed);
  GradSuiteResult out;

  // REG1 with a lower transform supplying the column-wise strength.
  {
    const MeanFieldMatrix<D> lower = snapshot_matrix("lower", 5, 4, rng);
    const MeanFieldMatrix<D> m = snapshot_matrix("upper", 3, 5, rng, 0);
    const Tensor<D>* lower_sigma = &lower.snapshot_sigma();
    out.cases.push_back(check_inputs("reg1", {{"phi", m.phi}}, [&](Tape<D>& t, std::vector<Var>& v) {
      return reg1(t, v[0], m, 0.05, lower_sigma, 0.04);
    }));
  }
  // REG2 away from its zero crossings.
  {
    const MeanFieldMatrix<D> m = snapshot_matrix("reg2", 4, 3, rng);
    out.cases.push_back(check_inputs("reg2", {{"phi", m.phi}}, [&](Tape<D>& t, std::vector<Var>& v) {
      return reg2(t, v[0], m, 0.05);
    }));
  }
  {
    const MeanFieldMatrix<D> m = snapshot_matrix("reg3", 6, 2, rng);
    out.cases.push_back(check_inputs("reg3", {{"rho", m.rho}}, [&](Tape<D>& t, std::vector<Var>& v) {
      return reg3(t, v[0], m);
    }));
  }
  // total_reg over two chained transforms with a partial preservation mask.
  {
    const MeanFieldMatrix<D> a = snapshot_matrix("a", 4, 3, rng);
    const MeanFieldMatrix<D> b = snapshot_matrix("b", 2, 4, rng, 0);
    ByteMask mask_b(b.phi.size());
    for (std::size_t i = 0; i < mask_b.size(); ++i) mask_b[i] = static_cast<std::uint8_t>(i % 3 != 0);
    RegConfig cfg;
    cfg.alpha = 0.7;
    cfg.beta = 0.4;
    cfg.gamma = 0.3;
    std::vector<const MeanFieldMatrix<D>*> layers{&a, &b};
    std::vector<const ByteMask*> masks{nullptr, &mask_b};
    out.cases.push_back(check_inputs("total_reg",
                                     {{"a.phi", a.phi}, {"a.rho", a.rho}, {"b.phi", b.phi}, {"b.rho", b.rho}},
                                     [&](Tape<D>& t, std::vector<Var>& v) {
                                       std::vector<MeanFieldVars> vars{{v[0], v[1]}, {v[2], v[3]}};
                                       return total_reg<D>(t, layers, vars, cfg, masks);
                                     }));
  }
  // Loss weights make every output element matter with a distinct coefficient.
  auto weighted = [&](const Shape& s) { return Tensor<D>::randn(s, rng, 1.0); };
  {
    const Tensor<D> x = Tensor<D>::randn(Shape{3, 5}, rng, 1.0);
    const Tensor<D> gain = Tensor<D>::randn(Shape{5}, rng, 1.0);
    const Tensor<D> bias = Tensor<D>::randn(Shape{5}, rng, 1.0);
    const Tensor<D> w = weighted(Shape{3, 5});
    out.cases.push_back(check_inputs("layer_norm", {{"x", x}, {"gain", gain}, {"bias", bias}},
                                     [&](Tape<D>& t, std::vector<Var>& v) {
                                       return ops::weighted_sum(t, ops::layer_norm(t, v[0], v[1], v[2]), w);
                                     }));
  }
  {
    const std::vector<ops::Segment> segs{{0, 3}, {3, 2}};
    const Tensor<D> q = Tensor<D>::randn(Shape{5, 4}, rng, 1.0);
    const Tensor<D> k = Tensor<D>::randn(Shape{5, 4}, rng, 1.0);
    const Tensor<D> v = Tensor<D>::randn(Shape{5, 4}, rng, 1.0);
    const Tensor<D> w = weighted(Shape{5, 4});
    out.cases.push_back(check_inputs("attention", {{"q", q}, {"k", k}, {"v", v}}, [&](Tape<D>& t, std::vector<Var>& in) {
      return ops::weighted_sum(t, ops::attention(t, in[0], in[1], in[2], 2, segs, 0.5), w);
    }));
  }
  // Full encoder layer with the residual function, every input checked.
  {
    const EncoderConfig c = tiny_encoder();
    const std::size_t d = c.d_model, f = c.ff_width(), p = c.prf_width();
    const std::vector<ops::Segment> segs{{0, 3}, {3, 2}};
    auto r = [&](std::size_t a, std::size_t b, double s) { return Tensor<D>::randn(Shape{a, b}, rng, s); };
    auto rv = [&](std::size_t a, double s, double mean) {
      Tensor<D> x = Tensor<D>::randn(Shape{a}, rng, s);
      for (std::size_t i = 0; i < a; ++i) x[i] += mean;
      return x;
    };
    const std::vector<std::pair<std::string, Tensor<D>>> inputs{
        {"h", r(5, d, 1.0)},       {"wq", r(d, d, 0.4)},       {"wk", r(d, d, 0.4)},       {"wv", r(d, d, 0.4)},
        {"wc", r(d, d, 0.4)},      {"wf1", r(f, d, 0.4)},      {"b1", rv(f, 0.1, 0.0)},    {"wf2", r(d, f, 0.4)},
        {"b2", rv(d, 0.1, 0.0)},   {"ln1_gain", rv(d, 0.2, 1.0)}, {"ln1_bias", rv(d, 0.1, 0.0)},
        {"ln2_gain", rv(d, 0.2, 1.0)}, {"ln2_bias", rv(d, 0.1, 0.0)}, {"prf.down", r(p, d, 0.4)},
        {"prf.up", r(d, p, 0.4)},  {"prf.wq", r(p, p, 0.4)},   {"prf.wk", r(p, p, 0.4)},   {"prf.wv", r(p, p, 0.4)},
        {"prf.wc", r(p, p, 0.4)}};
    const Tensor<D> w = weighted(Shape{5, d});
    out.cases.push_back(check_inputs("ipr_layer", inputs, [&](Tape<D>& t, std::vector<Var>& v) {
      LayerVars lv{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12]};
      PrfVars pv{v[13], v[14], v[15], v[16], v[17], v[18]};
      return ops::weighted_sum(t, ipr_layer(t, v[0], lv, &pv, c, segs), w);
    }));
  }
  // Cross-entropy plus the regularizer through a whole model, with noise on
  // preserved entries, checked against one transform's Phi and rho and the
  // task head.
  {
    const EncoderConfig c = tiny_encoder();
    RegConfig reg;
    reg.alpha = 0.5;
    reg.beta = 0.2;
    reg.gamma = 0.1;
    Encoder<D> model(c, reg, true, seed);
    model.add_task(1);
    for (auto& m : model.transforms()) {
      for (std::size_t r = 0; r < m.rho.size(); ++r) m.rho[r] = std::log(0.05) + 0.3 * std::sin(static_cast<double>(r));
      snapshot_after_task(m);
    }
    model.add_task(2);
    std::uniform_real_distribution<double> mag(0.05, 0.2);
    std::bernoulli_distribution sign(0.5);
    for (auto& m : model.transforms()) {
      for (std::size_t i = 0; i < m.phi.size(); ++i) m.phi[i] += sign(rng) ? mag(rng) : -mag(rng);
      for (std::size_t r = 0; r < m.rho.size(); ++r) m.rho[r] += mag(rng);
    }
    const std::size_t n_slots = model.transforms().size();
    std::vector<ByteMask> preserved(n_slots);
    WeightPlan<D> plan;
    plan.keep.resize(n_slots);
    plan.noise.resize(n_slots);
    for (std::size_t s = 0; s < n_slots; ++s) {
      const auto& m = model.transforms()[s];
      preserved[s].resize(m.phi.size());
      for (std::size_t i = 0; i < m.phi.size(); ++i) preserved[s][i] = static_cast<std::uint8_t>((i + s) % 2);
      plan.noise[s] = std::make_shared<const Tensor<D>>(sample_noise(m, preserved[s], 1.0, rng));
    }
    const std::vector<std::vector<int>> seqs{{kClsId, 5, 7, 9}, {kClsId, 4, 11}};
    std::vector<const std::vector<int>*> ptrs{&seqs[0], &seqs[1]};
    const PackedBatch batch = pack_batch(ptrs, c);
    const std::vector<int> labels{1, 0};
    const std::size_t slot = slot_of(0, TransformKind::ff_in);
    const Tensor<D>& phi = model.transforms()[slot].phi;
    const Tensor<D>& rho = model.transforms()[slot].rho;
    const Tensor<D>& head = model.head(2).weight;
    const std::vector<std::pair<std::string, const Tensor<D>*>> targets{{"wf1.phi", &phi}, {"wf1.rho", &rho}, {"head", &head}};
    const auto start = std::chrono::steady_clock::now();
    GradCase gc;
    gc.name = "combined_objective";
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const Tensor<D>* target = targets[i].second;
      ScalarFn<D> f = [&](Tape<D>& t, Var x) {
        ParamBinder<D> bind(t, false);
        bind.bind_as(*target, x);
        return combined_objective(bind, model, batch, labels, 2, plan, &reg, &preserved).total;
      };
      const double err = grad_check<D>(f, *target, 1e-5);
      if (i == 0 || err > gc.max_rel_error) {
        gc.max_rel_error = err;
        gc.worst_input = targets[i].first;
      }
    }
    gc.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.cases.push_back(gc);
  }
  return out;
}

}  // namespace iprls
