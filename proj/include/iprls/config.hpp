#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iprls {

/// Raised for invalid configuration values.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { gelu, relu };

inline std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t max_len = 32;
  std::size_t d_ff = 0;       // 0 means 4 * d_model
  std::size_t d_prf = 0;      // 0 means d_model / 8
  std::size_t n_heads_prf = 2;
  Activation activation = Activation::gelu;
  std::size_t vocab_size = 2048;
  std::size_t n_classes = 2;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }
  std::size_t prf_width() const { return d_prf ? d_prf : d_model / 8; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || max_len < 2) throw ConfigError("encoder sizes must be positive");
    if (d_model % n_heads) throw ConfigError("d_model must be divisible by n_heads");
    if (prf_width() == 0 || n_heads_prf == 0) throw ConfigError("PRF width and heads must be positive");
    if (prf_width() % n_heads_prf) throw ConfigError("d_prf must be divisible by n_heads_prf");
    if (prf_width() >= d_model) throw ConfigError("d_prf must be smaller than d_model");
    if (vocab_size < 4) throw ConfigError("vocab_size too small for reserved ids");
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  }
};

struct RegConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double gamma = 0.03;
  double upsilon = 1.0;
  double sigma_init = 0.05;
  /// Optional per-encoder-layer override of sigma_init.
  std::vector<double> sigma_init_per_layer;

  double sigma_init_for(std::size_t layer) const {
    return layer < sigma_init_per_layer.size() ? sigma_init_per_layer[layer] : sigma_init;
  }

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("alpha, beta, gamma must be non-negative");
    if (upsilon < 0) throw ConfigError("upsilon must be non-negative");
    if (!(sigma_init > 0)) throw ConfigError("sigma_init must be positive");
    for (double s : sigma_init_per_layer) {
      if (!(s > 0)) throw ConfigError("sigma_init must be positive");
    }
  }
};

struct PruneSchedule {
  double first_task_fraction = 0.40;
  double later_fraction = 0.75;

  double fraction_for(int task) const { return task <= 1 ? first_task_fraction : later_fraction; }

  void validate() const {
    for (double f : {first_task_fraction, later_fraction}) {
      if (!(f > 0 && f < 1)) throw ConfigError("prune fractions must lie in (0,1)");
    }
  }
};

struct AblationFlags {
  bool no_prune = false;
  bool no_reg = false;
  bool no_prf = false;
  bool freeze_preserved = false;

  bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
  int epochs_initial = 3;
  int epochs_retrain = 3;
  std::size_t batch_size = 32;
  double lr_main_initial = 1e-3;
  double lr_main_retrain = 1e-4;
  double lr_prf_initial = 1e-4;
  double lr_prf_retrain = 1e-5;
  double weight_decay = 4e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  AblationFlags flags;

  void validate() const {
    if (epochs_initial < 1 || epochs_retrain < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    for (double lr : {lr_main_initial, lr_main_retrain, lr_prf_initial, lr_prf_retrain}) {
      if (!(lr > 0)) throw ConfigError("learning rates must be positive");
    }
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  }
};

/// Where the task stream comes from.
struct StreamSpec {
  enum class Kind { synthetic, manifest };
  Kind kind = Kind::synthetic;
  int tasks = 5;
  std::uint64_t data_seed = 7;
  double shared_signal = 0.5;
  double domain_drift = 0.5;
  std::size_t train_size = 1400;
  std::size_t dev_size = 200;
  std::size_t test_size = 400;
  std::string manifest;
  std::uint64_t split_seed = 13;
  /// Optional task permutation (0-based indices into the generated list).
  std::vector<std::size_t> order;
};

/// Everything needed to reproduce one run.
struct RunConfig {
  EncoderConfig encoder;
  RegConfig reg;
  TrainConfig train;
  PruneSchedule prune;
  StreamSpec stream;

  void validate() const {
    encoder.validate();
    reg.validate();
    train.validate();
    prune.validate();
  }
};

/// Presets for the baseline and ablation runs.
inline AblationFlags naive_flags() { return {true, true, true, false}; }
inline AblationFlags packnet_flags() { return {false, true, true, true}; }

}  // namespace iprls
