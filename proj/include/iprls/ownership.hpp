#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iprls/config.hpp"
#include "iprls/meanfield.hpp"

namespace iprls {

using OwnerLabel = std::uint16_t;
inline constexpr OwnerLabel kFree = 0xFFFF;

enum class Phase { initial, retrain };

inline const char* to_string(Phase p) { return p == Phase::initial ? "initial" : "retrain"; }

/// One prune event for one transform.
struct PruneOutcome {
  int task = 0;
  std::size_t slot = 0;
  std::size_t candidates = 0;
  std::size_t freed = 0;

  bool operator==(const PruneOutcome&) const = default;
};

/// Frees the floor(fraction * candidates) entries owned by `task` with the
/// smallest |Phi| / sigma and zeroes their Phi. Ties go to the smaller index.
template <class T>
std::size_t prune_current_task(MeanFieldMatrix<T>& layer, std::span<OwnerLabel> owner, int task, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("prune fraction must lie in (0,1)");
  if (owner.size() != layer.phi.size()) throw ShapeError(layer.name + ": owner map size mismatch");
  const auto label = static_cast<OwnerLabel>(task);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] == label) candidates.push_back(i);
  }
  if (candidates.empty()) throw std::runtime_error(layer.name + ": no weights owned by task " + std::to_string(task));
  const std::size_t cols = layer.in_dim();
  auto score = [&](std::size_t i) { return std::abs(layer.phi[i]) / layer.sigma(i / cols); };
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return score(a) < score(b); });
  const auto n_free = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(candidates.size())));
  for (std::size_t r = 0; r < n_free; ++r) {
    owner[candidates[r]] = kFree;
    layer.phi[candidates[r]] = T(0);
  }
  return n_free;
}

/// Which entries may move in a phase: initial -> FREE or owned by an earlier
/// task; retrain -> only entries owned by the current task.
inline ByteMask trainable_mask(std::span<const OwnerLabel> owner, Phase phase, int task) {
  ByteMask m(owner.size());
  const auto label = static_cast<OwnerLabel>(task);
  for (std::size_t i = 0; i < owner.size(); ++i) {
    m[i] = phase == Phase::initial ? static_cast<std::uint8_t>(owner[i] == kFree || owner[i] < label)
                                   : static_cast<std::uint8_t>(owner[i] == label);
  }
  return m;
}

/// Binary on/off mask for evaluating task j: owner <= j is on, later owners
/// and FREE entries are off.
inline ByteMask inference_mask(std::span<const OwnerLabel> owner, int task) {
  ByteMask m(owner.size());
  const auto label = static_cast<OwnerLabel>(task);
  for (std::size_t i = 0; i < owner.size(); ++i) m[i] = static_cast<std::uint8_t>(owner[i] != kFree && owner[i] <= label);
  return m;
}

/// Entries owned by tasks before `task`.
inline ByteMask preserved_mask(std::span<const OwnerLabel> owner, int task) {
  ByteMask m(owner.size());
  const auto label = static_cast<OwnerLabel>(task);
  for (std::size_t i = 0; i < owner.size(); ++i) m[i] = static_cast<std::uint8_t>(owner[i] != kFree && owner[i] < label);
  return m;
}

struct PartitionReport {
  bool ok = true;
  std::vector<std::string> violations;

  explicit operator bool() const { return ok; }
  std::string summary() const {
    std::ostringstream os;
    for (const auto& v : violations) os << v << '\n';
    return os.str();
  }
};

/// Per-weight task ownership for every regularized transform. In shared mode
/// (no iterative pruning) nothing is ever claimed: every weight is active for
/// every task and every weight counts as preserved once a task has finished.
class OwnershipMap {
public:
  OwnershipMap() = default;
  OwnershipMap(const std::vector<std::size_t>& slot_sizes, bool shared) : shared_(shared) {
    labels_.reserve(slot_sizes.size());
    for (auto n : slot_sizes) labels_.emplace_back(n, kFree);
  }

  std::size_t slots() const { return labels_.size(); }
  std::span<const OwnerLabel> labels(std::size_t slot) const { return labels_.at(slot); }
  std::span<OwnerLabel> labels(std::size_t slot) { return labels_.at(slot); }
  bool shared() const { return shared_; }
  int tasks_completed() const { return tasks_completed_; }
  int active_task() const { return active_task_; }
  const std::vector<PruneOutcome>& history() const { return history_; }

  void begin_task(int task) {
    if (task != tasks_completed_ + 1) {
      throw std::logic_error("tasks must be learned in order: expected " + std::to_string(tasks_completed_ + 1) +
                             ", got " + std::to_string(task));
    }
    if (task >= static_cast<int>(kFree)) throw std::out_of_range("task id exceeds label range");
    active_task_ = task;
  }

  void complete_task(int task) {
    if (task != active_task_) throw std::logic_error("complete_task does not match the active task");
    tasks_completed_ = task;
    active_task_ = 0;
  }

  /// FREE entries become candidates owned by `task` (W^P_k = W^F_{k-1} before pruning).
  void claim_free(int task) {
    if (shared_) return;
    for (auto& slot : labels_) {
      for (auto& l : slot) {
        if (l == kFree) l = static_cast<OwnerLabel>(task);
      }
    }
  }

  template <class T>
  std::size_t prune(std::size_t slot, MeanFieldMatrix<T>& layer, int task, double fraction) {
    if (shared_) throw std::logic_error("prune called on a shared ownership map");
    const std::size_t candidates =
        static_cast<std::size_t>(std::count(labels_.at(slot).begin(), labels_.at(slot).end(), static_cast<OwnerLabel>(task)));
    const std::size_t freed = prune_current_task(layer, std::span<OwnerLabel>(labels_.at(slot)), task, fraction);
    history_.push_back({task, slot, candidates, freed});
    return freed;
  }

  ByteMask trainable(std::size_t slot, Phase phase, int task) const {
    if (shared_) return ByteMask(labels_.at(slot).size(), 1);
    return trainable_mask(labels(slot), phase, task);
  }

  /// Inference mask for task j; j may not exceed the tasks trained so far
  /// (including the one in progress).
  ByteMask inference(std::size_t slot, int task) const {
    if (task < 1 || task > std::max(tasks_completed_, active_task_)) {
      throw std::out_of_range("inference mask requested for untrained task " + std::to_string(task));
    }
    if (shared_) return ByteMask(labels_.at(slot).size(), 1);
    return inference_mask(labels(slot), task);
  }

  /// Entries carrying earlier-task knowledge while learning `task`; these get
  /// mean-field noise and uncertainty regularization.
  ByteMask preserved(std::size_t slot, int task) const {
    if (shared_) return ByteMask(labels_.at(slot).size(), task > 1 ? 1 : 0);
    return preserved_mask(labels(slot), task);
  }

  std::size_t count(std::size_t slot, OwnerLabel label) const {
    return static_cast<std::size_t>(std::count(labels_.at(slot).begin(), labels_.at(slot).end(), label));
  }

  /// Raw access for serialization.
  const std::vector<std::vector<OwnerLabel>>& raw() const { return labels_; }
  void restore(std::vector<std::vector<OwnerLabel>> labels, int tasks_completed, bool shared,
               std::vector<PruneOutcome> history = {}) {
    labels_ = std::move(labels);
    tasks_completed_ = tasks_completed;
    active_task_ = 0;
    shared_ = shared;
    history_ = std::move(history);
  }

private:
  std::vector<std::vector<OwnerLabel>> labels_;
  std::vector<PruneOutcome> history_;
  int tasks_completed_ = 0;
  int active_task_ = 0;
  bool shared_ = false;
};

/// Checks that labels form a valid partition after K completed tasks and that
/// the recorded prune outcomes match the schedule (floor rounding, +-1 weight)
/// and replay to the current per-task counts.
inline PartitionReport partition_check(const OwnershipMap& map, int K, const PruneSchedule& schedule) {
  PartitionReport report;
  auto fail = [&](std::string msg) {
    report.ok = false;
    report.violations.push_back(std::move(msg));
  };
  for (std::size_t s = 0; s < map.slots(); ++s) {
    for (OwnerLabel l : map.labels(s)) {
      if (l != kFree && (l < 1 || l > K)) {
        fail("slot " + std::to_string(s) + ": label " + std::to_string(l) + " outside {1.." + std::to_string(K) + ", FREE}");
        break;
      }
    }
  }
  if (map.shared()) {
    for (std::size_t s = 0; s < map.slots(); ++s) {
      if (map.count(s, kFree) != map.labels(s).size()) fail("shared map has claimed weights in slot " + std::to_string(s));
    }
    return report;
  }
  // Replay: each task's surviving count is candidates - freed, and candidates
  // for task k equal the FREE count left by task k-1.
  for (std::size_t s = 0; s < map.slots(); ++s) {
    std::size_t free_left = map.labels(s).size();
    for (int k = 1; k <= K; ++k) {
      const PruneOutcome* o = nullptr;
      for (const auto& h : map.history()) {
        if (h.slot == s && h.task == k) o = &h;
      }
      const std::string where = "slot " + std::to_string(s) + " task " + std::to_string(k);
      if (!o) {
        fail(where + ": no prune record");
        break;
      }
      if (o->candidates != free_left) fail(where + ": candidates " + std::to_string(o->candidates) + " != free pool " + std::to_string(free_left));
      const double expected = schedule.fraction_for(k) * static_cast<double>(o->candidates);
      if (std::abs(static_cast<double>(o->freed) - expected) > 1.0) {
        fail(where + ": freed " + std::to_string(o->freed) + " vs scheduled " + std::to_string(expected));
      }
      const std::size_t kept = map.count(s, static_cast<OwnerLabel>(k));
      if (kept != o->candidates - o->freed) {
        fail(where + ": owns " + std::to_string(kept) + " weights, replay says " + std::to_string(o->candidates - o->freed));
      }
      free_left = o->freed;
    }
    if (map.count(s, kFree) != free_left) {
      fail("slot " + std::to_string(s) + ": FREE count " + std::to_string(map.count(s, kFree)) + " != replay " + std::to_string(free_left));
    }
  }
  return report;
}

}  // namespace iprls
