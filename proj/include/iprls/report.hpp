#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iprls/config_io.hpp"
#include "iprls/metrics.hpp"
#include "iprls/studies.hpp"

namespace iprls {

using Json = nlohmann::ordered_json;

/// Rounds an accuracy-like value to 4 decimals for reporting.
inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

inline Json matrix_json(const TransferMatrix& A) {
  Json rows = Json::array();
  for (std::size_t i = 1; i <= A.size(); ++i) {
    Json row = Json::array();
    for (std::size_t j = 1; j <= i; ++j) row.push_back(round4(A.at(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json metrics_json(const TransferMatrix& A) {
  Json curve = Json::array();
  for (double c : avg_accuracy_curve(A)) curve.push_back(round4(c));
  Json m;
  m["final_average_accuracy"] = round4(final_average_accuracy(A));
  m["backward_transfer"] = round4(backward_transfer(A));
  m["average_accuracy_curve"] = std::move(curve);
  return m;
}

inline Json traces_json(const std::vector<TaskReport>& reports) {
  Json tasks = Json::array();
  for (const auto& r : reports) {
    Json t;
    t["task"] = r.task;
    t["name"] = r.name;
    t["dev_accuracy"] = round4(r.dev_accuracy);
    Json phases = Json::array();
    for (const auto& p : r.phases) {
      Json ph;
      ph["phase"] = to_string(p.phase);
      ph["steps"] = p.steps;
      ph["epoch_loss"] = p.epoch_loss;
      ph["epoch_ce"] = p.epoch_ce;
      phases.push_back(std::move(ph));
    }
    t["phases"] = std::move(phases);
    Json pruned = Json::array();
    for (const auto& o : r.pruned) pruned.push_back({{"slot", o.slot}, {"candidates", o.candidates}, {"freed", o.freed}});
    t["pruned"] = std::move(pruned);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

/// Self-contained report of one run. Wall-clock time is only included when
/// `with_timing` is set, so the default document is reproducible byte for byte.
inline Json run_report_json(const RunOutcome& run, bool with_timing = false) {
  Json j;
  j["label"] = run.label;
  j["seed"] = run.config.train.seed;
  j["config"] = config_to_json(run.config);
  j["task_names"] = run.task_names;
  j["task_order"] = run.order;
  j["transfer_matrix"] = matrix_json(run.result.matrix);
  j["metrics"] = metrics_json(run.result.matrix);
  j["tasks"] = traces_json(run.result.reports);
  if (with_timing) j["wall_clock_seconds"] = run.seconds;
  return j;
}

/// Line-delimited metric records: one per matrix cell, one per phase, and a
/// closing summary line.
inline std::string metrics_jsonl(const RunOutcome& run) {
  std::ostringstream os;
  const auto& A = run.result.matrix;
  for (std::size_t i = 1; i <= A.size(); ++i) {
    for (std::size_t j = 1; j <= i; ++j) {
      Json rec;
      rec["run"] = run.label;
      rec["kind"] = "accuracy";
      rec["after_task"] = i;
      rec["task"] = j;
      rec["accuracy"] = round4(A.at(i, j));
      rec["samples"] = A.samples(i, j);
      os << rec.dump() << '\n';
    }
  }
  for (const auto& r : run.result.reports) {
    for (const auto& p : r.phases) {
      for (std::size_t e = 0; e < p.epoch_loss.size(); ++e) {
        Json rec;
        rec["run"] = run.label;
        rec["kind"] = "epoch";
        rec["task"] = r.task;
        rec["phase"] = to_string(p.phase);
        rec["epoch"] = e + 1;
        rec["loss"] = p.epoch_loss[e];
        rec["ce"] = p.epoch_ce[e];
        os << rec.dump() << '\n';
      }
    }
  }
  Json s;
  s["run"] = run.label;
  s["kind"] = "summary";
  const Json m = metrics_json(A);
  for (const auto& [k, v] : m.items()) s[k] = v;
  os << s.dump() << '\n';
  return os.str();
}

/// `k,<label1>,<label2>,...` average-accuracy curves side by side.
inline std::string curves_csv(const std::vector<RunOutcome>& runs) {
  if (runs.empty()) return {};
  const std::size_t K = runs.front().result.matrix.size();
  std::vector<std::vector<double>> curves;
  for (const auto& r : runs) {
    if (r.result.matrix.size() != K) throw std::invalid_argument("curves_csv: runs have different lengths");
    curves.push_back(r.curve());
  }
  std::ostringstream os;
  os << "k";
  for (const auto& r : runs) os << ',' << r.label;
  os << '\n';
  for (std::size_t k = 0; k < K; ++k) {
    os << k + 1;
    for (const auto& c : curves) os << ',' << TransferMatrix::format4(c[k]);
    os << '\n';
  }
  return os.str();
}

inline std::string reinit_csv(const std::vector<ReinitDelta>& deltas) {
  std::ostringstream os;
  os << "task,lifelong,reinit,delta\n";
  for (const auto& d : deltas) {
    os << d.task << ',' << TransferMatrix::format4(d.lifelong) << ',' << TransferMatrix::format4(d.reinit) << ','
       << TransferMatrix::format4(d.delta) << '\n';
  }
  return os.str();
}

/// `label,final_average_mean,final_average_sd,bwt_mean,bwt_sd` for grouped runs.
inline std::string repeat_csv_header() { return "label,runs,final_average_mean,final_average_sd,bwt_mean,bwt_sd\n"; }

inline std::string repeat_csv_row(const std::string& label, std::size_t runs, const RepeatSummary& s) {
  std::ostringstream os;
  os << label << ',' << runs << ',' << TransferMatrix::format4(s.final_average.mean) << ','
     << TransferMatrix::format4(s.final_average.sd) << ',' << TransferMatrix::format4(s.bwt.mean) << ','
     << TransferMatrix::format4(s.bwt.sd) << '\n';
  return os.str();
}

inline Json repeat_json(const RepeatSummary& s) {
  Json j;
  j["final_average_accuracy"] = {{"mean", round4(s.final_average.mean)}, {"sd", round4(s.final_average.sd)}};
  j["backward_transfer"] = {{"mean", round4(s.bwt.mean)}, {"sd", round4(s.bwt.sd)}};
  Json curve = Json::array();
  for (const auto& c : s.curve) curve.push_back({{"mean", round4(c.mean)}, {"sd", round4(c.sd)}});
  j["average_accuracy_curve"] = std::move(curve);
  return j;
}

/// Wall-clock sidecar kept apart from the reproducible artifacts.
inline Json timing_json(const std::vector<RunOutcome>& runs) {
  Json j = Json::object();
  double total = 0.0;
  for (const auto& r : runs) {
    j[r.label] = r.seconds;
    total += r.seconds;
  }
  j["total"] = total;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Writes transfer.csv, metrics.jsonl and report.json for one run into `dir`.
inline void write_run_artifacts(const std::filesystem::path& dir, const RunOutcome& run) {
  write_text(dir / "transfer.csv", run.result.matrix.to_csv(run.task_names));
  write_text(dir / "metrics.jsonl", metrics_jsonl(run));
  write_text(dir / "report.json", run_report_json(run).dump(2) + "\n");
}

/// Rebuilds the transfer matrix stored in a RunReport document.
inline TransferMatrix matrix_from_report(const Json& report) {
  const Json& rows = report.at("transfer_matrix");
  TransferMatrix A(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != i + 1) throw std::runtime_error("report transfer matrix is not lower triangular");
    for (std::size_t j = 0; j <= i; ++j) A.set_value(i + 1, j + 1, rows[i][j].get<double>());
  }
  return A;
}

}  // namespace iprls
