#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "iprls/checkpoint.hpp"
#include "iprls/gradient_suite.hpp"
#include "iprls/studies.hpp"

using namespace iprls;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Verdict {
  int id = 0;
  bool pass = false;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  std::cout << "CRITERION " << id << ' ' << (pass ? "PASS" : "FAIL") << ": " << detail << std::endl;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  const GradSuiteResult r = run_gradient_suite(1);
  const double secs = since(t0);
  std::ostringstream os;
  double worst = 0.0;
  for (const auto& c : r.cases) {
    worst = std::max(worst, c.max_rel_error);
    std::cout << "  grad " << c.name << ": max rel err " << c.max_rel_error << " (" << c.worst_input << ")\n";
  }
  os << r.cases.size() << " cases, worst rel err " << worst << ", " << fmt(secs, 2) << " s";
  report(1, r.passed() && r.cases.size() == 8 && secs < 120.0, os.str());
}

// ---------------------------------------------------------------------------
// 2. Closed-form regularizer values
// ---------------------------------------------------------------------------

MeanFieldMatrix<double> make_transform(Tensor<double> prev_phi, std::vector<double> prev_sigma, Tensor<double> phi,
                                       std::vector<double> sigma) {
  MeanFieldMatrix<double> m("t", prev_phi, 0.5);
  for (std::size_t r = 0; r < prev_sigma.size(); ++r) m.rho[r] = std::log(prev_sigma[r]);
  snapshot_after_task(m);
  m.phi = std::move(phi);
  for (std::size_t r = 0; r < sigma.size(); ++r) m.rho[r] = std::log(sigma[r]);
  return m;
}

void criterion2() {
  bool ok = true;
  std::ostringstream os;
  const auto r1 = make_transform(Tensor<double>::matrix({{1.0, 1.0}}), {0.25}, Tensor<double>::matrix({{1.3, 1.4}}), {0.25});
  const double reg1 = reg1_value(r1, 0.5);
  const auto r2 = make_transform(Tensor<double>::matrix({{1.0, -2.0}}), {0.5}, Tensor<double>::matrix({{1.1, -2.1}}), {0.5});
  const double reg2 = reg2_value(r2, 0.5);
  const auto r3 = make_transform(Tensor<double>::matrix({{1.0}, {1.0}}), {1.0, 2.0}, Tensor<double>::matrix({{1.0}, {1.0}}), {2.0, 2.0});
  const double reg3 = reg3_value(r3);
  ok = ok && std::abs(reg1 - 1.0) < 1e-9 && std::abs(reg2 - 0.5) < 1e-9 && std::abs(reg3 - 3.6137) < 1e-3;
  os << "REG1 " << fmt(reg1, 6) << ", REG2 " << fmt(reg2, 6) << ", REG3 " << fmt(reg3, 6);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 2.0);
  std::size_t snapshot_failures = 0, bound_failures = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + trial % 7, cols = 1 + trial % 5;
    MeanFieldMatrix<double> m("t", Tensor<double>::randn(Shape{rows, cols}, rng), 0.3);
    for (std::size_t r = 0; r < rows; ++r) m.rho[r] = std::log(u(rng));
    snapshot_after_task(m);
    if (reg1_value(m, 0.3) != 0.0 || reg2_value(m, 0.3) != 0.0 ||
        std::abs(reg3_value(m) - static_cast<double>(rows)) > 1e-9) {
      ++snapshot_failures;
    }
    for (std::size_t r = 0; r < rows; ++r) m.rho[r] = std::log(u(rng));
    if (reg3_value(m) < static_cast<double>(rows) - 1e-12) ++bound_failures;
  }
  ok = ok && snapshot_failures == 0 && bound_failures == 0;
  os << "; snapshot identity failures " << snapshot_failures << "/200, REG3 bound failures " << bound_failures << "/200";
  report(2, ok, os.str());
}

// ---------------------------------------------------------------------------
// 3. Mask machinery (observer on the first full 5-task run of criterion 6)
// ---------------------------------------------------------------------------

class MaskAudit : public EngineObserver<float> {
public:
  explicit MaskAudit(PruneSchedule schedule) : schedule_(schedule) {}

  void before_phase(const Learner<float>& l, int, Phase phase) override {
    if (phase != Phase::retrain) return;
    before_.clear();
    for (const auto& m : l.model().transforms()) before_.push_back(m.phi);
  }

  void after_phase(const Learner<float>& l, int task, Phase phase) override {
    if (phase != Phase::retrain) return;
    const auto& tr = l.model().transforms();
    for (std::size_t s = 0; s < tr.size(); ++s) {
      const auto labels = l.owners().labels(s);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != task && std::memcmp(&tr[s].phi[i], &before_[s][i], sizeof(float)) != 0) {
          ++retrain_changes;
          if (labels[i] != kFree && labels[i] < task) ++retrain_changes_older;
        }
      }
    }
  }

  void after_prune(const Learner<float>& l, int task) override {
    const auto& tr = l.model().transforms();
    for (std::size_t s = 0; s < tr.size(); ++s) {
      const auto labels = l.owners().labels(s);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kFree && tr[s].phi[i] != 0.0f) ++nonzero_freed;
      }
    }
    for (const auto& h : l.owners().history()) {
      if (h.task != task) continue;
      const double expected = schedule_.fraction_for(task) * static_cast<double>(h.candidates);
      worst_fraction_gap = std::max(worst_fraction_gap, std::abs(static_cast<double>(h.freed) - expected));
      ++prune_records;
    }
  }

  void after_task(const Learner<float>& l, int task) override {
    const auto r = partition_check(l.owners(), task, schedule_);
    if (!r) {
      ++partition_failures;
      std::cout << "  partition_check after task " << task << ":\n" << r.summary();
    }
    ++tasks_seen;
  }

  std::size_t retrain_changes = 0, retrain_changes_older = 0, nonzero_freed = 0, prune_records = 0;
  int partition_failures = 0, tasks_seen = 0;
  double worst_fraction_gap = 0.0;

private:
  PruneSchedule schedule_;
  std::vector<Tensor<float>> before_;
};

void criterion3(const MaskAudit& a, std::size_t slots) {
  std::ostringstream os;
  os << "tasks audited " << a.tasks_seen << ", partition failures " << a.partition_failures << ", prune records "
     << a.prune_records << ", worst |freed - scheduled| " << fmt(a.worst_fraction_gap, 3) << ", non-zero freed weights "
     << a.nonzero_freed << ", retrain changes to owner<k weights " << a.retrain_changes_older
     << " (to any non-owned weight " << a.retrain_changes << ")";
  const bool ok = a.tasks_seen == 5 && a.partition_failures == 0 && a.prune_records == 5 * slots &&
                  a.worst_fraction_gap <= 1.0 && a.nonzero_freed == 0 && a.retrain_changes_older == 0;
  report(3, ok, os.str());
}

// ---------------------------------------------------------------------------
// 4. Inference isolation
// ---------------------------------------------------------------------------

int task_of_record(const std::string& name) {
  if (name.rfind("task", 0) != 0) return 0;
  return std::stoi(name.substr(4, name.find('.') - 4));
}

void criterion4() {
  RunConfig cfg;
  cfg.stream.tasks = 3;
  cfg.stream.train_size = 400;
  cfg.stream.dev_size = 50;
  cfg.stream.test_size = 200;
  cfg.train.epochs_initial = 2;
  cfg.train.epochs_retrain = 1;
  const TaskStream stream = build_stream(cfg);
  Learner<float> trained(cfg);
  run_stream(trained, stream);
  const std::string bytes = checkpoint_bytes(trained);

  std::size_t mismatches = 0, randomized = 0;
  for (int j = 1; j <= 3; ++j) {
    const Tensor<float> reference = trained.logits(stream.tasks[j - 1].test, j);
    Learner<float> l = learner_from_bytes<float>(bytes);
    std::mt19937_64 rng(100 + j);
    std::normal_distribution<float> noise(0.0f, 3.0f);
    auto& tr = l.model().transforms();
    for (std::size_t s = 0; s < tr.size(); ++s) {
      const auto labels = l.owners().labels(s);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kFree || labels[i] > j) {
          tr[s].phi[i] = noise(rng);
          ++randomized;
        }
      }
      for (std::size_t r = 0; r < tr[s].rho.size(); ++r) tr[s].rho[r] = noise(rng);
    }
    l.model().for_each_parameter([&](const std::string& name, Tensor<float>& x) {
      const int owner = task_of_record(name);
      if (owner > j || name.rfind("live.", 0) == 0) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = noise(rng);
      }
    });
    const Tensor<float> after = l.logits(stream.tasks[j - 1].test, j);
    if (after.shape() != reference.shape() ||
        std::memcmp(after.raw(), reference.raw(), after.size() * sizeof(float)) != 0) {
      ++mismatches;
    }
  }
  std::ostringstream os;
  os << "3 tasks, " << randomized << " transform entries randomized (owner > j or FREE) plus later-task heads, PRFs "
     << "and layer-local parameters; tasks with changed logits " << mismatches << "/3";
  report(4, mismatches == 0 && randomized > 0, os.str());
}

// ---------------------------------------------------------------------------
// 5. PackNet-degenerate mode
// ---------------------------------------------------------------------------

void criterion5() {
  RunConfig cfg;
  cfg.train.flags = packnet_flags();
  cfg.stream.train_size = 400;
  cfg.stream.dev_size = 50;
  cfg.stream.test_size = 200;
  cfg.train.epochs_initial = 2;
  cfg.train.epochs_retrain = 1;
  const TaskStream stream = build_stream(cfg);
  const auto r = run_stream<float>(cfg, stream);
  const auto& A = r.matrix;
  std::size_t unequal = 0;
  for (std::size_t i = 2; i <= A.size(); ++i) {
    for (std::size_t j = 1; j < i; ++j) unequal += A.at(i, j) != A.at(j, j) ? 1 : 0;
  }
  const double bwt = backward_transfer(A);
  std::cout << A.to_csv();
  std::ostringstream os;
  os << A.size() << " tasks, cells with A[i][j] != A[j][j]: " << unequal << ", BWT " << bwt;
  report(5, unequal == 0 && bwt == 0.0, os.str());
}

// ---------------------------------------------------------------------------
// 6 and 9. Forgetting experiment and ablation directions
// ---------------------------------------------------------------------------

struct SeedRuns {
  std::vector<RunOutcome> full, naive, no_ip, no_reg;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double task1_drop(const RunOutcome& r) {
  const auto& A = r.result.matrix;
  return A.at(A.size(), 1) - A.at(1, 1);
}

double early_final(const RunOutcome& r) {
  const auto& A = r.result.matrix;
  return (A.at(A.size(), 1) + A.at(A.size(), 2)) / 2.0;
}

double late_average(const RunOutcome& r) {
  const auto c = r.curve();
  return (c[c.size() - 2] + c[c.size() - 1]) / 2.0;
}

void criterion6(const SeedRuns& s, double seconds) {
  std::vector<double> fa_full, fa_naive, drop_full, drop_naive;
  for (std::size_t i = 0; i < s.full.size(); ++i) {
    fa_full.push_back(s.full[i].final_average());
    fa_naive.push_back(s.naive[i].final_average());
    drop_full.push_back(task1_drop(s.full[i]));
    drop_naive.push_back(task1_drop(s.naive[i]));
    std::cout << "  seed " << s.full[i].config.train.seed << ": full final " << fmt(fa_full.back()) << " drop "
              << fmt(drop_full.back()) << " | naive final " << fmt(fa_naive.back()) << " drop " << fmt(drop_naive.back())
              << "\n";
  }
  const double gain = mean(fa_full) - mean(fa_naive);
  const double drop_gap = std::abs(mean(drop_naive)) - std::abs(mean(drop_full));
  std::ostringstream os;
  os << "mean final average full " << fmt(mean(fa_full)) << " vs naive " << fmt(mean(fa_naive)) << " (+"
     << fmt(100 * gain, 2) << " pts); mean task-1 drop full " << fmt(mean(drop_full)) << " vs naive "
     << fmt(mean(drop_naive)) << " (" << fmt(100 * drop_gap, 2) << " pts smaller); " << fmt(seconds, 1) << " s";
  report(6, gain >= 0.05 && drop_gap >= 0.05 && seconds < 900.0, os.str());
}

void criterion9(const SeedRuns& s) {
  std::vector<double> early_full, early_noip, late_full, late_noreg;
  for (std::size_t i = 0; i < s.full.size(); ++i) {
    early_full.push_back(early_final(s.full[i]));
    early_noip.push_back(early_final(s.no_ip[i]));
    late_full.push_back(late_average(s.full[i]));
    late_noreg.push_back(late_average(s.no_reg[i]));
    std::cout << "  seed " << s.full[i].config.train.seed << ": early-task final full " << fmt(early_full.back())
              << " no_IP " << fmt(early_noip.back()) << " | late-stream average full " << fmt(late_full.back())
              << " no_REG " << fmt(late_noreg.back()) << "\n";
  }
  std::ostringstream os;
  os << "early-task final accuracy (tasks 1-2) full " << fmt(mean(early_full)) << " vs no_IP " << fmt(mean(early_noip))
     << "; late-stream average accuracy (after tasks 4-5) full " << fmt(mean(late_full)) << " vs no_REG "
     << fmt(mean(late_noreg));
  report(9, mean(early_noip) < mean(early_full) && mean(late_noreg) < mean(late_full), os.str());
}

// ---------------------------------------------------------------------------
// 7. PRF overhead
// ---------------------------------------------------------------------------

std::size_t enumerate_base(const EncoderConfig& c) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (const auto& [rows, cols] : transform_shapes(c)) n += rows * cols;
  }
  return n;
}

void criterion7() {
  bool exact = true;
  for (std::size_t d : {16u, 32u, 64u}) {
    for (std::size_t layers : {1u, 2u, 3u}) {
      EncoderConfig c;
      c.d_model = d;
      c.n_heads = 4;
      c.n_layers = layers;
      Encoder<float> model(c, RegConfig{}, true, 1);
      model.add_task(1);
      std::size_t prf = 0, base = 0;
      model.for_each_parameter([&](const std::string& name, const Tensor<float>& x) {
        if (name.find(".prf.") != std::string::npos) prf += x.size();
        if (name.size() > 4 && name.compare(name.size() - 4, 4, ".phi") == 0) base += x.size();
      });
      exact = exact && prf == prf_parameter_count(c) && base == regularized_parameter_count(c);
    }
  }
  EncoderConfig bert;
  bert.d_model = 768;
  bert.n_heads = 12;
  bert.n_layers = 12;
  bert.d_ff = 3072;
  bert.d_prf = 96;
  bert.n_heads_prf = 2;
  std::mt19937_64 rng(1);
  const std::size_t prf_enum = PrfParams<float>::init(bert, rng).parameter_count();
  const std::size_t base_enum = enumerate_base(bert);
  exact = exact && prf_enum == prf_parameter_count(bert) && base_enum == regularized_parameter_count(bert);
  const double ratio = static_cast<double>(prf_parameter_count(bert)) / static_cast<double>(regularized_parameter_count(bert));
  std::ostringstream os;
  os << "closed form == enumeration: " << (exact ? "yes" : "no") << "; BERT_BASE shape PRF " << prf_parameter_count(bert)
     << " / encoder transforms " << regularized_parameter_count(bert) << " = " << fmt(100 * ratio, 3)
     << "% (required band 1.0%-2.5%)";
  report(7, exact && ratio >= 0.010 && ratio <= 0.025, os.str());
}

// ---------------------------------------------------------------------------
// 8. Determinism
// ---------------------------------------------------------------------------

void criterion8() {
  RunConfig cfg;
  cfg.stream.tasks = 3;
  cfg.stream.train_size = 200;
  cfg.stream.dev_size = 40;
  cfg.stream.test_size = 100;
  cfg.train.epochs_initial = 1;
  cfg.train.epochs_retrain = 1;
  cfg.train.seed = 5;
  std::string csv[2], ckpt[2];
  for (int r = 0; r < 2; ++r) {
    const TaskStream stream = build_stream(cfg);
    Learner<float> l(cfg);
    const auto res = run_stream(l, stream);
    std::vector<std::string> names;
    for (const auto& t : stream.tasks) names.push_back(t.name);
    csv[r] = res.matrix.to_csv(names);
    ckpt[r] = checkpoint_bytes(l);
  }
  std::ostringstream os;
  os << "transfer CSV identical: " << (csv[0] == csv[1] ? "yes" : "no") << " (" << csv[0].size()
     << " bytes); checkpoint identical: " << (ckpt[0] == ckpt[1] ? "yes" : "no") << " (" << ckpt[0].size() << " bytes)";
  report(8, csv[0] == csv[1] && ckpt[0] == ckpt[1], os.str());
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  criterion1();
  criterion2();

  RunConfig base;  // d_m 64, 2 layers, 4 heads, 5 tasks, default regularizer and schedule
  const TaskStream stream = build_stream(base);
  SeedRuns runs;
  MaskAudit audit(base.prune);
  double forgetting_seconds = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    RunConfig full = base;
    full.train.seed = seed;
    RunConfig naive = full;
    naive.train.flags = naive_flags();
    runs.full.push_back(run_labeled<float>("full", full, stream, seed == 1 ? &audit : nullptr));
    runs.naive.push_back(run_labeled<float>("naive", naive, stream));
    forgetting_seconds += runs.full.back().seconds + runs.naive.back().seconds;
    std::cout << "  seed " << seed << " full:\n" << runs.full.back().result.matrix.to_csv()
              << "  seed " << seed << " naive:\n" << runs.naive.back().result.matrix.to_csv();
  }
  criterion3(audit, Learner<float>(base).owners().slots());
  criterion4();
  criterion5();
  criterion6(runs, forgetting_seconds);
  criterion7();
  criterion8();

  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const auto& v : ablation_variants(base.train.flags)) {
      if (v.label != "no_IP" && v.label != "no_REG") continue;
      RunConfig c = base;
      c.train.seed = seed;
      c.train.flags = v.flags;
      (v.label == "no_IP" ? runs.no_ip : runs.no_reg).push_back(run_labeled<float>(v.label, c, stream));
    }
  }
  criterion9(runs);

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::size_t passed = 0;
  std::cout << "\nSUMMARY (" << fmt(since(t0), 1) << " s)\n";
  for (const auto& v : verdicts) {
    std::cout << "CRITERION " << v.id << ' ' << (v.pass ? "PASS" : "FAIL") << '\n';
    passed += v.pass ? 1 : 0;
  }
  std::cout << passed << "/" << verdicts.size() << " criteria passed\n";
  return passed == verdicts.size() ? 0 : 1;
}
