#pragma once

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iprls {

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// A[i][j]: accuracy on task j's test set after training through task i,
/// defined for j <= i (1-based).
class TransferMatrix {
public:
  TransferMatrix() = default;
  explicit TransferMatrix(std::size_t K) : K_(K), cells_(K * K) {}

  std::size_t size() const { return K_; }

  void set(std::size_t i, std::size_t j, Accuracy a) {
    if (a.total == 0 || a.correct > a.total) throw std::invalid_argument("invalid accuracy counts");
    cell(i, j) = {a.accuracy(), a.total, true};
  }

  /// Sets a cell from a bare accuracy value, e.g. an aggregate over runs.
  void set_value(std::size_t i, std::size_t j, double v, std::size_t samples = 0) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("accuracy outside [0,1]");
    cell(i, j) = {v, samples, true};
  }

  bool defined(std::size_t i, std::size_t j) const { return cell(i, j).filled; }

  double at(std::size_t i, std::size_t j) const {
    const Cell& c = cell(i, j);
    if (!c.filled) throw std::out_of_range("transfer matrix cell not filled");
    return c.value;
  }

  std::size_t samples(std::size_t i, std::size_t j) const { return cell(i, j).samples; }

  /// Lower-triangular CSV, 4 decimals, cells above the diagonal left empty.
  std::string to_csv(const std::vector<std::string>& names = {}) const {
    std::ostringstream os;
    os << "after_task";
    for (std::size_t j = 1; j <= K_; ++j) os << ',' << (j <= names.size() ? names[j - 1] : "task" + std::to_string(j));
    os << '\n';
    for (std::size_t i = 1; i <= K_; ++i) {
      os << i;
      for (std::size_t j = 1; j <= K_; ++j) {
        os << ',';
        if (j <= i && defined(i, j)) os << format4(at(i, j));
      }
      os << '\n';
    }
    return os.str();
  }

  static std::string format4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
  }

private:
  struct Cell {
    double value = 0.0;
    std::size_t samples = 0;
    bool filled = false;
  };

  Cell& cell(std::size_t i, std::size_t j) { return cells_[index(i, j)]; }
  const Cell& cell(std::size_t i, std::size_t j) const { return cells_[index(i, j)]; }

  std::size_t index(std::size_t i, std::size_t j) const {
    if (i < 1 || i > K_ || j < 1 || j > i) {
      throw std::out_of_range("transfer matrix index (" + std::to_string(i) + "," + std::to_string(j) + ") invalid");
    }
    return (i - 1) * K_ + (j - 1);
  }

  std::size_t K_ = 0;
  std::vector<Cell> cells_;
};

/// curve[k-1] = mean over j <= k of A[k][j].
inline std::vector<double> avg_accuracy_curve(const TransferMatrix& A) {
  std::vector<double> curve;
  for (std::size_t k = 1; k <= A.size(); ++k) {
    double s = 0.0;
    for (std::size_t j = 1; j <= k; ++j) s += A.at(k, j);
    curve.push_back(s / static_cast<double>(k));
  }
  return curve;
}

/// Mean over j < K of A[K][j] - A[j][j]; 0 for a single task.
inline double backward_transfer(const TransferMatrix& A) {
  const std::size_t K = A.size();
  if (K < 2) return 0.0;
  double s = 0.0;
  for (std::size_t j = 1; j < K; ++j) s += A.at(K, j) - A.at(j, j);
  return s / static_cast<double>(K - 1);
}

inline double final_average_accuracy(const TransferMatrix& A) {
  if (A.size() == 0) return 0.0;
  return avg_accuracy_curve(A).back();
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

/// Sample mean and standard deviation (n - 1 denominator; sd = 0 for n = 1).
inline MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace iprls
