#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "iprls/config.hpp"

namespace iprls {

/// One documented key of the run configuration file.
struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}

inline std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

template <class N>
std::vector<N> parse_list(const std::string& key, const std::string& v) {
  std::vector<N> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<N>(key, item));
  }
  return out;
}

template <class N>
std::string join_list(const std::vector<N>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<N>) {
      out += format_double(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

template <class F>
ConfigKey make_number(std::string key, std::string help, F field) {
  using N = std::remove_cvref_t<decltype(field(std::declval<RunConfig&>()))>;
  ConfigKey k;
  k.key = key;
  k.help = std::move(help);
  k.set = [key, field](RunConfig& c, const std::string& v) { field(c) = parse_number<N>(key, v); };
  k.get = [field](const RunConfig& c) {
    if constexpr (std::is_floating_point_v<N>) {
      return format_double(field(c));
    } else {
      return std::to_string(field(c));
    }
  };
  return k;
}

template <class F>
ConfigKey make_bool(std::string key, std::string help, F field) {
  ConfigKey k;
  k.key = key;
  k.help = std::move(help);
  k.set = [key, field](RunConfig& c, const std::string& v) { field(c) = parse_bool(key, v); };
  k.get = [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); };
  return k;
}

}  // namespace detail

/// The full configuration schema, in canonical order.
inline const std::vector<ConfigKey>& config_schema() {
  using detail::make_bool;
  using detail::make_number;
  static const std::vector<ConfigKey> schema = [] {
    std::vector<ConfigKey> s;
    // encoder
    s.push_back(make_number("d_model", "model width", [](auto& c) -> auto& { return c.encoder.d_model; }));
    s.push_back(make_number("n_heads", "attention heads", [](auto& c) -> auto& { return c.encoder.n_heads; }));
    s.push_back(make_number("n_layers", "encoder layers", [](auto& c) -> auto& { return c.encoder.n_layers; }));
    s.push_back(make_number("max_len", "sequence length including CLS", [](auto& c) -> auto& { return c.encoder.max_len; }));
    s.push_back(make_number("d_ff", "feed-forward width (0 = 4*d_model)", [](auto& c) -> auto& { return c.encoder.d_ff; }));
    s.push_back(make_number("d_prf", "residual-function width (0 = d_model/8)", [](auto& c) -> auto& { return c.encoder.d_prf; }));
    s.push_back(make_number("n_heads_prf", "residual-function attention heads", [](auto& c) -> auto& { return c.encoder.n_heads_prf; }));
    {
      ConfigKey k;
      k.key = "activation";
      k.help = "feed-forward activation (gelu|relu)";
      k.set = [](RunConfig& c, const std::string& v) { c.encoder.activation = parse_activation(v); };
      k.get = [](const RunConfig& c) { return to_string(c.encoder.activation); };
      s.push_back(std::move(k));
    }
    s.push_back(make_number("vocab_size", "hash vocabulary size", [](auto& c) -> auto& { return c.encoder.vocab_size; }));
    s.push_back(make_number("n_classes", "output classes", [](auto& c) -> auto& { return c.encoder.n_classes; }));
    // regularizer
    s.push_back(make_number("alpha", "REG1 weight", [](auto& c) -> auto& { return c.reg.alpha; }));
    s.push_back(make_number("beta", "REG2 weight", [](auto& c) -> auto& { return c.reg.beta; }));
    s.push_back(make_number("gamma", "REG3 weight", [](auto& c) -> auto& { return c.reg.gamma; }));
    s.push_back(make_number("upsilon", "noise scale on preserved weights", [](auto& c) -> auto& { return c.reg.upsilon; }));
    s.push_back(make_number("sigma_init", "initial standard deviation", [](auto& c) -> auto& { return c.reg.sigma_init; }));
    {
      ConfigKey k;
      k.key = "sigma_init_per_layer";
      k.help = "comma-separated per-layer sigma_init overrides";
      k.set = [](RunConfig& c, const std::string& v) {
        c.reg.sigma_init_per_layer = detail::parse_list<double>("sigma_init_per_layer", v);
      };
      k.get = [](const RunConfig& c) { return detail::join_list(c.reg.sigma_init_per_layer); };
      s.push_back(std::move(k));
    }
    // pruning
    s.push_back(make_number("prune_first", "fraction freed after task 1", [](auto& c) -> auto& { return c.prune.first_task_fraction; }));
    s.push_back(make_number("prune_later", "fraction freed after later tasks", [](auto& c) -> auto& { return c.prune.later_fraction; }));
    // training
    s.push_back(make_number("epochs_initial", "initial-phase epochs", [](auto& c) -> auto& { return c.train.epochs_initial; }));
    s.push_back(make_number("epochs_retrain", "retrain-phase epochs", [](auto& c) -> auto& { return c.train.epochs_retrain; }));
    s.push_back(make_number("batch_size", "minibatch size", [](auto& c) -> auto& { return c.train.batch_size; }));
    s.push_back(make_number("lr_main_initial", "encoder learning rate, initial phase", [](auto& c) -> auto& { return c.train.lr_main_initial; }));
    s.push_back(make_number("lr_main_retrain", "encoder learning rate, retrain phase", [](auto& c) -> auto& { return c.train.lr_main_retrain; }));
    s.push_back(make_number("lr_prf_initial", "residual-function learning rate, initial phase", [](auto& c) -> auto& { return c.train.lr_prf_initial; }));
    s.push_back(make_number("lr_prf_retrain", "residual-function learning rate, retrain phase", [](auto& c) -> auto& { return c.train.lr_prf_retrain; }));
    s.push_back(make_number("weight_decay", "decoupled decay on the linear transforms", [](auto& c) -> auto& { return c.train.weight_decay; }));
    s.push_back(make_number("adam_beta1", "Adam beta1", [](auto& c) -> auto& { return c.train.adam_beta1; }));
    s.push_back(make_number("adam_beta2", "Adam beta2", [](auto& c) -> auto& { return c.train.adam_beta2; }));
    s.push_back(make_number("adam_eps", "Adam epsilon", [](auto& c) -> auto& { return c.train.adam_eps; }));
    s.push_back(make_number("seed", "model and training seed", [](auto& c) -> auto& { return c.train.seed; }));
    s.push_back(make_bool("no_prune", "disable iterative pruning (shared ownership)", [](auto& c) -> auto& { return c.train.flags.no_prune; }));
    s.push_back(make_bool("no_reg", "disable uncertainty regularization and noise", [](auto& c) -> auto& { return c.train.flags.no_reg; }));
    s.push_back(make_bool("no_prf", "disable the parallel residual function", [](auto& c) -> auto& { return c.train.flags.no_prf; }));
    s.push_back(make_bool("freeze_preserved", "never update earlier-task weights", [](auto& c) -> auto& { return c.train.flags.freeze_preserved; }));
    // stream
    {
      ConfigKey k;
      k.key = "stream";
      k.help = "task source (synthetic|manifest)";
      k.set = [](RunConfig& c, const std::string& v) {
        if (v == "synthetic") {
          c.stream.kind = StreamSpec::Kind::synthetic;
        } else if (v == "manifest") {
          c.stream.kind = StreamSpec::Kind::manifest;
        } else {
          throw ConfigError("unknown stream kind '" + v + "'");
        }
      };
      k.get = [](const RunConfig& c) {
        return std::string(c.stream.kind == StreamSpec::Kind::synthetic ? "synthetic" : "manifest");
      };
      s.push_back(std::move(k));
    }
    s.push_back(make_number("tasks", "number of synthetic tasks", [](auto& c) -> auto& { return c.stream.tasks; }));
    s.push_back(make_number("data_seed", "synthetic data seed", [](auto& c) -> auto& { return c.stream.data_seed; }));
    s.push_back(make_number("shared_signal", "fraction of cues shared across tasks", [](auto& c) -> auto& { return c.stream.shared_signal; }));
    s.push_back(make_number("domain_drift", "fraction of drift words per example", [](auto& c) -> auto& { return c.stream.domain_drift; }));
    s.push_back(make_number("train_size", "synthetic training examples per task", [](auto& c) -> auto& { return c.stream.train_size; }));
    s.push_back(make_number("dev_size", "synthetic dev examples per task", [](auto& c) -> auto& { return c.stream.dev_size; }));
    s.push_back(make_number("test_size", "synthetic test examples per task", [](auto& c) -> auto& { return c.stream.test_size; }));
    {
      ConfigKey k;
      k.key = "manifest";
      k.help = "path of a stream manifest listing TSV task files";
      k.set = [](RunConfig& c, const std::string& v) { c.stream.manifest = v; };
      k.get = [](const RunConfig& c) { return c.stream.manifest; };
      s.push_back(std::move(k));
    }
    s.push_back(make_number("split_seed", "seed of the 70/10/20 split", [](auto& c) -> auto& { return c.stream.split_seed; }));
    {
      ConfigKey k;
      k.key = "order";
      k.help = "comma-separated 0-based task permutation";
      k.set = [](RunConfig& c, const std::string& v) { c.stream.order = detail::parse_list<std::size_t>("order", v); };
      k.get = [](const RunConfig& c) { return detail::join_list(c.stream.order); };
      s.push_back(std::move(k));
    }
    return s;
  }();
  return schema;
}

inline const ConfigKey* find_config_key(std::string_view key) {
  for (const auto& k : config_schema()) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

inline void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw ConfigError("unknown configuration key '" + key + "'");
  k->set(cfg, value);
}

/// Parses `key = value` lines on top of `cfg`. '#' starts a comment; blank
/// lines are ignored; unknown keys are errors.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    try {
      apply_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open configuration file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  apply_config_text(cfg, ss.str());
}

/// Canonical `key = value` dump; parsing it reproduces `cfg`.
inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

/// Ordered JSON echo of every key (string values as in the text format).
inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& k : config_schema()) j[k.key] = k.get(cfg);
  return j;
}

inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    apply_config_value(cfg, key, value.is_string() ? value.get<std::string>() : value.dump());
  }
  return cfg;
}

}  // namespace iprls
