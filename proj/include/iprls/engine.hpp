#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iprls/adamw.hpp"
#include "iprls/config.hpp"
#include "iprls/encoder.hpp"
#include "iprls/meanfield.hpp"
#include "iprls/metrics.hpp"
#include "iprls/ownership.hpp"
#include "iprls/task_data.hpp"

namespace iprls {

struct PhaseTrace {
  int task = 0;
  Phase phase = Phase::initial;
  std::vector<double> epoch_loss;     // cross-entropy + regularizer
  std::vector<double> epoch_ce;       // cross-entropy alone
  std::size_t steps = 0;
};

struct TaskReport {
  int task = 0;
  std::string name;
  std::vector<PhaseTrace> phases;
  std::vector<PruneOutcome> pruned;
  double dev_accuracy = 0.0;
};

template <class T>
class Learner;

/// Hooks into the learn cycle; the default implementation does nothing.
template <class T>
class EngineObserver {
public:
  virtual ~EngineObserver() = default;
  virtual void before_phase(const Learner<T>&, int /*task*/, Phase) {}
  virtual void after_phase(const Learner<T>&, int /*task*/, Phase) {}
  virtual void after_prune(const Learner<T>&, int /*task*/) {}
  virtual void after_task(const Learner<T>&, int /*task*/) {}
};

struct Objective {
  Var ce;
  Var total;
};

/// Cross-entropy on the batch plus, when `reg` is given, the uncertainty
/// regularizer over every transform (REG1/REG2 limited to `reg_masks`).
template <class T>
Objective combined_objective(ParamBinder<T>& bind, const Encoder<T>& model, const PackedBatch& batch,
                             std::vector<int> labels, int task, const WeightPlan<T>& plan, const RegConfig* reg,
                             const std::vector<ByteMask>* reg_masks = nullptr) {
  Tape<T>& t = bind.tape();
  Var logits = model.forward(bind, batch, task, plan);
  Var ce = ops::cross_entropy(t, logits, std::move(labels));
  if (!reg) return {ce, ce};
  const auto& tr = model.transforms();
  std::vector<const MeanFieldMatrix<T>*> layers;
  std::vector<MeanFieldVars> vars;
  std::vector<const ByteMask*> masks;
  for (std::size_t s = 0; s < tr.size(); ++s) {
    layers.push_back(&tr[s]);
    vars.push_back({bind(tr[s].phi), bind(tr[s].rho)});
    masks.push_back(reg_masks ? &reg_masks->at(s) : nullptr);
  }
  return {ce, ops::add(t, ce, total_reg<T>(t, layers, vars, *reg, masks))};
}

/// Runs the iterative-pruning / uncertainty-regularization learn cycle over a
/// task stream with one encoder.
template <class T = float>
class Learner {
public:
  Learner(const RunConfig& cfg) : cfg_(cfg), model_(init_model(cfg)), owners_(model_.slot_sizes(), cfg.train.flags.no_prune) {}

  const RunConfig& config() const { return cfg_; }
  TrainConfig& train_config() { return cfg_.train; }
  const Encoder<T>& model() const { return model_; }
  Encoder<T>& model() { return model_; }
  const OwnershipMap& owners() const { return owners_; }
  OwnershipMap& owners() { return owners_; }
  int tasks_completed() const { return owners_.tasks_completed(); }

  void set_observer(EngineObserver<T>* obs) { observer_ = obs; }

  /// One optimization phase for `task` (which must be the active task).
  PhaseTrace train_phase(const TaskSpec& data, Phase phase) {
    const int k = data.id;
    if (k != owners_.active_task()) throw std::logic_error("train_phase: task is not active");
    if (data.train.empty()) throw std::invalid_argument("train_phase: empty training set");
    const auto& f = cfg_.train.flags;
    const bool regularize = !f.no_reg && k > 1;
    const bool train_rho = regularize && phase == Phase::initial;
    const std::size_t n_slots = owners_.slots();

    std::vector<ByteMask> trainable(n_slots), noisy(n_slots), reg_masks;
    WeightPlan<T> plan;
    plan.keep.resize(n_slots);
    plan.noise.resize(n_slots);
    bool any_noise = false;
    for (std::size_t s = 0; s < n_slots; ++s) {
      trainable[s] = owners_.trainable(s, phase, k);
      if (f.freeze_preserved && !owners_.shared()) {
        const ByteMask pres = owners_.preserved(s, k);
        for (std::size_t i = 0; i < pres.size(); ++i) {
          if (pres[i]) trainable[s][i] = 0;
        }
      }
      if (phase == Phase::retrain) plan.keep[s] = std::make_shared<const ByteMask>(owners_.inference(s, k));
      if (regularize) {
        noisy[s] = owners_.preserved(s, k);
        any_noise = any_noise || std::any_of(noisy[s].begin(), noisy[s].end(), [](auto b) { return b != 0; });
        if (phase == Phase::initial) reg_masks.push_back(noisy[s]);
      }
    }
    const bool use_noise = regularize && any_noise && cfg_.reg.upsilon > 0;

    const bool initial = phase == Phase::initial;
    AdamHyper main{initial ? cfg_.train.lr_main_initial : cfg_.train.lr_main_retrain, 0.0, cfg_.train.adam_beta1,
                   cfg_.train.adam_beta2, cfg_.train.adam_eps};
    AdamHyper decayed = main;
    decayed.weight_decay = cfg_.train.weight_decay;
    AdamHyper prf_h = main;
    prf_h.lr = initial ? cfg_.train.lr_prf_initial : cfg_.train.lr_prf_retrain;

    std::seed_seq seq{cfg_.train.seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(phase), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    if (observer_) observer_->before_phase(*this, k, phase);
    PhaseTrace trace{k, phase, {}, {}, 0};
    const int epochs = initial ? cfg_.train.epochs_initial : cfg_.train.epochs_retrain;
    const std::size_t bs = cfg_.train.batch_size;
    for (int e = 0; e < epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0, ce_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t end = std::min(order.size(), start + bs);
        std::vector<const std::vector<int>*> seqs;
        std::vector<int> labels;
        for (std::size_t i = start; i < end; ++i) {
          seqs.push_back(&data.train[order[i]].tokens);
          labels.push_back(data.train[order[i]].label);
        }
        const PackedBatch batch = pack_batch(seqs, model_.config());
        if (use_noise) {
          for (std::size_t s = 0; s < n_slots; ++s) {
            plan.noise[s] = std::make_shared<const Tensor<T>>(
                sample_noise(model_.transforms()[s], noisy[s], static_cast<T>(cfg_.reg.upsilon), rng));
          }
        }
        Tape<T> tape;
        ParamBinder<T> bind(tape, true);
        const Objective obj = combined_objective(bind, model_, batch, std::move(labels), k, plan,
                                                 regularize && initial ? &cfg_.reg : nullptr, &reg_masks);
        Var ce = obj.ce;
        Var loss = obj.total;
        tape.backward(loss);
        const double n = static_cast<double>(end - start);
        loss_sum += tape.value(loss).item() * n;
        ce_sum += tape.value(ce).item() * n;

        optimizer_.step += 1;
        for (std::size_t s = 0; s < n_slots; ++s) {
          auto& m = model_.transforms()[s];
          update(bind, m.phi, m.name + ".phi", decayed, &trainable[s]);
          if (train_rho) update(bind, m.rho, m.name + ".rho", main, nullptr);
        }
        auto& loc = model_.live_local();
        for (std::size_t l = 0; l < loc.size(); ++l) {
          loc[l].for_each([&](const char* nm, Tensor<T>& p) {
            update(bind, p, "live.layer" + std::to_string(l) + "." + nm, main, nullptr);
          });
        }
        auto& hd = model_.head(k);
        update(bind, hd.weight, "head.weight", main, nullptr);
        update(bind, hd.bias, "head.bias", main, nullptr);
        if (auto* p = model_.prf_params(k)) {
          p->for_each([&](const std::string& nm, Tensor<T>& x) { update(bind, x, "prf." + nm, prf_h, nullptr); });
        }
        ++trace.steps;
      }
      trace.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
      trace.epoch_ce.push_back(ce_sum / static_cast<double>(order.size()));
    }
    if (observer_) observer_->after_phase(*this, k, phase);
    return trace;
  }

  /// initial training -> prune (unless no_prune) -> retraining -> snapshots.
  TaskReport learn_task(const TaskSpec& data) {
    const int k = data.id;
    if (k != owners_.tasks_completed() + 1) {
      throw std::logic_error("learn_task: expected task " + std::to_string(owners_.tasks_completed() + 1) + ", got " +
                             std::to_string(k));
    }
    owners_.begin_task(k);
    model_.add_task(k);
    optimizer_.reset();
    TaskReport report;
    report.task = k;
    report.name = data.name;
    report.phases.push_back(train_phase(data, Phase::initial));
    if (!cfg_.train.flags.no_prune) {
      owners_.claim_free(k);
      const double frac = cfg_.prune.fraction_for(k);
      for (std::size_t s = 0; s < owners_.slots(); ++s) owners_.prune(s, model_.transforms()[s], k, frac);
      for (const auto& h : owners_.history()) {
        if (h.task == k) report.pruned.push_back(h);
      }
      if (observer_) observer_->after_prune(*this, k);
    }
    report.phases.push_back(train_phase(data, Phase::retrain));
    for (auto& m : model_.transforms()) snapshot_after_task(m);
    model_.snapshot_local(k);
    owners_.complete_task(k);
    if (!data.dev.empty()) report.dev_accuracy = evaluate(data.dev, k).accuracy();
    if (observer_) observer_->after_task(*this, k);
    return report;
  }

  /// Eval-mode logits of task j for a list of examples.
  Tensor<T> logits(const std::vector<Example>& examples, int task) const {
    std::vector<const std::vector<int>*> seqs;
    for (const auto& e : examples) seqs.push_back(&e.tokens);
    return model_.logits(seqs, task, inference_plan<T>(owners_, task));
  }

  /// Accuracy of task j's classifier (inference masks, mean weights, task j's
  /// layer-local snapshot, head and PRF).
  Accuracy evaluate(const std::vector<Example>& examples, int task, std::size_t batch = 128) const {
    if (examples.empty()) throw std::invalid_argument("evaluate: empty example set");
    const WeightPlan<T> plan = inference_plan<T>(owners_, task);
    Accuracy acc;
    for (std::size_t start = 0; start < examples.size(); start += batch) {
      const std::size_t end = std::min(examples.size(), start + batch);
      std::vector<const std::vector<int>*> seqs;
      for (std::size_t i = start; i < end; ++i) seqs.push_back(&examples[i].tokens);
      const Tensor<T> z = model_.logits(seqs, task, plan);
      for (std::size_t i = start; i < end; ++i) {
        const T* row = z.raw() + (i - start) * z.cols();
        const auto pred = static_cast<int>(std::max_element(row, row + z.cols()) - row);
        acc.correct += pred == examples[i].label ? 1 : 0;
        acc.total += 1;
      }
    }
    return acc;
  }

private:
  static Encoder<T> init_model(const RunConfig& cfg) {
    cfg.validate();
    return Encoder<T>(cfg.encoder, cfg.reg, !cfg.train.flags.no_prf, cfg.train.seed);
  }

  void update(ParamBinder<T>& bind, Tensor<T>& p, const std::string& name, const AdamHyper& h, const ByteMask* mask) {
    auto v = bind.find(p);
    if (!v) return;
    Tape<T>& t = bind.tape();
    if (!t.has_grad(*v)) return;
    adam_decoupled_step(p, t.grad_of(v->id), optimizer_, name, h, mask);
  }

  RunConfig cfg_;
  Encoder<T> model_;
  OwnershipMap owners_;
  OptimizerState<T> optimizer_;
  EngineObserver<T>* observer_ = nullptr;
};

struct StreamResult {
  TransferMatrix matrix;
  std::vector<TaskReport> reports;
};

/// Learns every task in order; after task i evaluates the test sets of tasks
/// 1..i into row i of the transfer matrix.
template <class T = float>
StreamResult run_stream(Learner<T>& learner, const TaskStream& stream) {
  StreamResult out{TransferMatrix(stream.size()), {}};
  for (std::size_t i = 0; i < stream.size(); ++i) {
    out.reports.push_back(learner.learn_task(stream.tasks[i]));
    for (std::size_t j = 0; j <= i; ++j) {
      out.matrix.set(i + 1, j + 1, learner.evaluate(stream.tasks[j].test, static_cast<int>(j) + 1));
    }
  }
  return out;
}

template <class T = float>
StreamResult run_stream(const RunConfig& cfg, const TaskStream& stream, EngineObserver<T>* observer = nullptr) {
  Learner<T> learner(cfg);
  learner.set_observer(observer);
  return run_stream(learner, stream);
}

}  // namespace iprls
