#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "iprls/engine.hpp"
#include "iprls/metrics.hpp"
#include "iprls/task_data.hpp"

namespace iprls {

/// One labelled run of a stream with its wall-clock time.
struct RunOutcome {
  std::string label;
  RunConfig config;
  std::vector<std::size_t> order;
  std::vector<std::string> task_names;
  StreamResult result;
  double seconds = 0.0;

  double final_average() const { return final_average_accuracy(result.matrix); }
  double bwt() const { return backward_transfer(result.matrix); }
  std::vector<double> curve() const { return avg_accuracy_curve(result.matrix); }
};

template <class T = float>
RunOutcome run_labeled(std::string label, const RunConfig& cfg, const TaskStream& stream,
                       EngineObserver<T>* observer = nullptr) {
  RunOutcome out;
  out.label = std::move(label);
  out.config = cfg;
  out.order = stream.order;
  for (const auto& t : stream.tasks) out.task_names.push_back(t.name);
  const auto start = std::chrono::steady_clock::now();
  out.result = run_stream<T>(cfg, stream, observer);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// A single task renumbered as the first task of a fresh stream.
inline TaskStream single_task_stream(const TaskSpec& task) {
  TaskStream s;
  s.tasks.push_back(task);
  s.tasks.front().id = 1;
  s.order = {0};
  return s;
}

struct ReinitDelta {
  int task = 0;
  double lifelong = 0.0;  // A[k][k] of the lifelong run
  double reinit = 0.0;    // fresh model trained on task k alone
  double delta = 0.0;     // lifelong - reinit
};

/// For every k >= 2: diagonal accuracy of the lifelong run minus the test
/// accuracy of a freshly initialized model (same config) trained only on task k.
template <class T = float>
std::vector<ReinitDelta> forward_transfer_vs_reinit(const RunConfig& cfg, const TaskStream& stream,
                                                    const StreamResult& lifelong) {
  if (lifelong.matrix.size() != stream.size()) throw std::invalid_argument("lifelong result does not match the stream");
  std::vector<ReinitDelta> out;
  for (std::size_t k = 2; k <= stream.size(); ++k) {
    const TaskStream single = single_task_stream(stream.tasks[k - 1]);
    const StreamResult fresh = run_stream<T>(cfg, single);
    ReinitDelta d;
    d.task = static_cast<int>(k);
    d.lifelong = lifelong.matrix.at(k, k);
    d.reinit = fresh.matrix.at(1, 1);
    d.delta = d.lifelong - d.reinit;
    out.push_back(d);
  }
  return out;
}

template <class T = float>
std::vector<ReinitDelta> forward_transfer_vs_reinit(const RunConfig& cfg, const TaskStream& stream) {
  return forward_transfer_vs_reinit<T>(cfg, stream, run_stream<T>(cfg, stream));
}

struct AblationVariant {
  std::string label;
  AblationFlags flags;
};

/// full, no_IP, no_REG, no_PRF relative to the flags in `base`.
inline std::vector<AblationVariant> ablation_variants(const AblationFlags& base) {
  AblationFlags full = base;
  full.no_prune = full.no_reg = full.no_prf = false;
  AblationFlags no_ip = full, no_reg = full, no_prf = full;
  no_ip.no_prune = true;
  no_reg.no_reg = true;
  no_prf.no_prf = true;
  return {{"full", full}, {"no_IP", no_ip}, {"no_REG", no_reg}, {"no_PRF", no_prf}};
}

/// Four runs sharing seeds and data that differ only in one ablation flag.
template <class T = float>
std::vector<RunOutcome> ablation_suite(const RunConfig& cfg, const TaskStream& stream) {
  std::vector<RunOutcome> out;
  for (const auto& v : ablation_variants(cfg.train.flags)) {
    RunConfig c = cfg;
    c.train.flags = v.flags;
    out.push_back(run_labeled<T>(v.label, c, stream));
  }
  return out;
}

/// `n` distinct random permutations of 0..K-1 (fewer if K! < n).
inline std::vector<std::vector<std::size_t>> sample_orderings(std::size_t K, std::size_t n, std::uint64_t seed) {
  if (K == 0) throw std::invalid_argument("sample_orderings: empty task list");
  std::size_t distinct = 1;
  for (std::size_t i = 2; i <= K && distinct < n; ++i) distinct *= i;
  n = std::min(n, distinct);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(K);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::vector<std::size_t>> out;
  while (out.size() < n) {
    std::shuffle(perm.begin(), perm.end(), rng);
    if (seen.insert(perm).second) out.push_back(perm);
  }
  return out;
}

/// One full run per ordering of `base` (orderings index the base task list).
template <class T = float>
std::vector<RunOutcome> ordering_study(const RunConfig& cfg, const TaskStream& base,
                                       const std::vector<std::vector<std::size_t>>& orderings) {
  std::vector<RunOutcome> out;
  for (std::size_t i = 0; i < orderings.size(); ++i) {
    const TaskStream s = permute_stream(base, orderings[i]);
    out.push_back(run_labeled<T>("order" + std::to_string(i + 1), cfg, s));
  }
  return out;
}

template <class T = float>
std::vector<RunOutcome> ordering_study(const RunConfig& cfg, const TaskStream& base, std::size_t n_orders,
                                       std::uint64_t seed) {
  return ordering_study<T>(cfg, base, sample_orderings(base.size(), n_orders, seed));
}

/// Mean and sample sd across repeated runs.
struct RepeatSummary {
  MeanSd final_average;
  MeanSd bwt;
  std::vector<MeanSd> curve;
};

inline RepeatSummary summarize_repeats(const std::vector<RunOutcome>& runs) {
  if (runs.empty()) throw std::invalid_argument("summarize_repeats: no runs");
  RepeatSummary s;
  std::vector<double> fa, bw;
  const std::size_t K = runs.front().result.matrix.size();
  std::vector<std::vector<double>> curves(K);
  for (const auto& r : runs) {
    if (r.result.matrix.size() != K) throw std::invalid_argument("summarize_repeats: stream lengths differ");
    fa.push_back(r.final_average());
    bw.push_back(r.bwt());
    const auto c = r.curve();
    for (std::size_t k = 0; k < K; ++k) curves[k].push_back(c[k]);
  }
  s.final_average = mean_sd(fa);
  s.bwt = mean_sd(bw);
  for (const auto& c : curves) s.curve.push_back(mean_sd(c));
  return s;
}

/// `repeats` runs with training seeds seed, seed+1, ...; the data is shared.
template <class T = float>
std::vector<RunOutcome> repeat_runs(const std::string& label, const RunConfig& cfg, const TaskStream& stream,
                                    std::size_t repeats) {
  if (repeats == 0) throw std::invalid_argument("repeats must be >= 1");
  std::vector<RunOutcome> out;
  for (std::size_t r = 0; r < repeats; ++r) {
    RunConfig c = cfg;
    c.train.seed = cfg.train.seed + r;
    out.push_back(run_labeled<T>(repeats == 1 ? label : label + ".seed" + std::to_string(c.train.seed), c, stream));
  }
  return out;
}

}  // namespace iprls
