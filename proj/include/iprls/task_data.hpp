#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "iprls/config.hpp"
#include "iprls/encoder.hpp"

namespace iprls {

/// Raised for malformed task input files.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Example {
  std::vector<int> tokens;  // CLS-prefixed, padded/truncated to max_len
  int label = 0;

  bool operator==(const Example&) const = default;
};

struct RawExample {
  std::string text;
  int label = 0;
};

struct TaskSpec {
  int id = 0;
  std::string name;
  std::vector<Example> train, dev, test;
};

struct TaskStream {
  std::vector<TaskSpec> tasks;
  /// order[i] = index of tasks[i] in the originally generated/listed stream.
  std::vector<std::size_t> order;
  std::uint64_t seed = 0;

  std::size_t size() const { return tasks.size(); }
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Lowercase, whitespace split, hash each word into [kFirstWordId, vocab),
/// prepend CLS, then pad or truncate to max_len.
inline std::vector<int> encode(std::string_view text, std::size_t max_len, std::size_t vocab_size) {
  if (max_len < 1) throw std::invalid_argument("max_len must be positive");
  if (vocab_size <= static_cast<std::size_t>(kFirstWordId)) throw std::invalid_argument("vocab too small");
  std::vector<int> ids{kClsId};
  const std::uint64_t buckets = vocab_size - kFirstWordId;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (ids.size() < max_len) ids.push_back(kFirstWordId + static_cast<int>(fnv1a(word) % buckets));
    word.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  ids.resize(max_len, kPadId);
  return ids;
}

inline Example encode_example(const RawExample& r, const EncoderConfig& c) {
  return {encode(r.text, c.max_len, c.vocab_size), r.label};
}

// ---------------------------------------------------------------------------
// Synthetic domain-drifting stream
// ---------------------------------------------------------------------------

struct RawTask {
  std::string name;
  std::vector<RawExample> train, dev, test;
};

/// Vocabulary sizes of the synthetic generator.
struct SyntheticShape {
  std::size_t shared_cues = 12;     // per polarity, common to all tasks
  std::size_t drift_words = 40;     // pool reused by every task with task-specific polarity
  std::size_t private_cues = 12;    // per polarity, unique to a task
  std::size_t background = 600;     // neutral words common to all tasks
  std::size_t topic_words = 60;     // neutral words unique to a task
  std::size_t min_words = 8;
  std::size_t max_words = 20;
  std::size_t min_cues = 2;
  std::size_t max_cues = 4;
  double topic_rate = 0.3;
};

namespace detail {

inline std::vector<RawExample> synth_split(std::size_t n, int task, const std::vector<int>& drift_polarity,
                                           double shared_signal, double domain_drift, const SyntheticShape& shape,
                                           std::mt19937_64& rng) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::size_t> drift_pos, drift_neg;
  for (std::size_t i = 0; i < drift_polarity.size(); ++i) (drift_polarity[i] ? drift_pos : drift_neg).push_back(i);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](std::size_t count) { return std::uniform_int_distribution<std::size_t>(0, count - 1)(rng); };
  const std::string t = "t" + std::to_string(task);
  std::vector<RawExample> out;
  out.reserve(n);
  for (int y : labels) {
    const char pol = y ? 'p' : 'n';
    const std::size_t words = shape.min_words + pick(shape.max_words - shape.min_words + 1);
    const std::size_t cues = shape.min_cues + pick(shape.max_cues - shape.min_cues + 1);
    std::vector<std::string> toks;
    for (std::size_t c = 0; c < cues; ++c) {
      if (unit(rng) < shared_signal) {
        toks.push_back(std::string("s") + pol + std::to_string(pick(shape.shared_cues)));
      } else {
        const auto& pool = y ? drift_pos : drift_neg;
        if (!pool.empty() && unit(rng) < domain_drift) {
          toks.push_back("dw" + std::to_string(pool[pick(pool.size())]));
        } else {
          toks.push_back(t + pol + std::to_string(pick(shape.private_cues)));
        }
      }
    }
    while (toks.size() < words) {
      if (unit(rng) < shape.topic_rate) {
        toks.push_back(t + "w" + std::to_string(pick(shape.topic_words)));
      } else {
        toks.push_back("w" + std::to_string(pick(shape.background)));
      }
    }
    std::shuffle(toks.begin(), toks.end(), rng);
    std::string text;
    for (const auto& w : toks) {
      if (!text.empty()) text.push_back(' ');
      text += w;
    }
    out.push_back({std::move(text), y});
  }
  return out;
}

}  // namespace detail

/// K sentiment-like tasks. Each cue in an example comes from the shared
/// polarity pools with probability shared_signal; otherwise from the drift
/// pool (polarity re-drawn per task) with probability domain_drift, else
/// from the task's private cues. Remaining words are neutral.
inline std::vector<RawTask> generate_synthetic_raw(int K, std::uint64_t seed, double shared_signal, double domain_drift,
                                                   std::size_t train = 1400, std::size_t dev = 200,
                                                   std::size_t test = 400, const SyntheticShape& shape = {}) {
  if (K < 1) throw std::invalid_argument("synthetic stream needs at least one task");
  if (shared_signal < 0 || shared_signal > 1 || domain_drift < 0 || domain_drift > 1) {
    throw std::invalid_argument("shared_signal and domain_drift must lie in [0,1]");
  }
  if (train == 0 || dev == 0 || test == 0) throw std::invalid_argument("split sizes must be positive");
  std::vector<RawTask> tasks;
  for (int k = 1; k <= K; ++k) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(k), std::uint64_t{0xda7a}};
    std::mt19937_64 rng(seq);
    std::vector<int> polarity(shape.drift_words);
    for (std::size_t i = 0; i < polarity.size(); ++i) polarity[i] = static_cast<int>(i % 2);
    std::shuffle(polarity.begin(), polarity.end(), rng);
    RawTask t;
    t.name = "domain" + std::to_string(k);
    t.train = detail::synth_split(train, k, polarity, shared_signal, domain_drift, shape, rng);
    t.dev = detail::synth_split(dev, k, polarity, shared_signal, domain_drift, shape, rng);
    t.test = detail::synth_split(test, k, polarity, shared_signal, domain_drift, shape, rng);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

inline TaskSpec encode_task(const RawTask& raw, int id, const EncoderConfig& c) {
  TaskSpec t{id, raw.name, {}, {}, {}};
  for (const auto& r : raw.train) t.train.push_back(encode_example(r, c));
  for (const auto& r : raw.dev) t.dev.push_back(encode_example(r, c));
  for (const auto& r : raw.test) t.test.push_back(encode_example(r, c));
  return t;
}

inline TaskStream generate_synthetic_stream(int K, std::uint64_t seed, double shared_signal, double domain_drift,
                                            const EncoderConfig& c, std::size_t train = 1400, std::size_t dev = 200,
                                            std::size_t test = 400) {
  const auto raw = generate_synthetic_raw(K, seed, shared_signal, domain_drift, train, dev, test);
  TaskStream s;
  s.seed = seed;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    s.tasks.push_back(encode_task(raw[i], static_cast<int>(i) + 1, c));
    s.order.push_back(i);
  }
  return s;
}

/// Reorders a stream; task ids are renumbered 1..K in the new order.
inline TaskStream permute_stream(const TaskStream& base, const std::vector<std::size_t>& perm) {
  if (perm.size() != base.size()) throw std::invalid_argument("permutation length does not match stream");
  std::vector<bool> seen(perm.size(), false);
  TaskStream s;
  s.seed = base.seed;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw std::invalid_argument("not a permutation");
    seen[perm[i]] = true;
    TaskSpec t = base.tasks[perm[i]];
    t.id = static_cast<int>(i) + 1;
    s.tasks.push_back(std::move(t));
    s.order.push_back(base.order[perm[i]]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// TSV ingestion
// ---------------------------------------------------------------------------

/// Reads "label<TAB>text" lines; labels must be "0" or "1". Blank lines are skipped.
inline std::vector<RawExample> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<RawExample> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.find('\t');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tab == std::string::npos) throw DataError(where + ": expected 'label<TAB>text'");
    const std::string label = line.substr(0, tab);
    if (label != "0" && label != "1") throw DataError(where + ": label must be 0 or 1, got '" + label + "'");
    rows.push_back({line.substr(tab + 1), label == "1" ? 1 : 0});
  }
  if (rows.empty()) throw DataError(path.string() + ": no examples");
  return rows;
}

/// 70/10/20 train/dev/test split after a seeded shuffle.
inline TaskSpec split_task(std::vector<RawExample> rows, int id, std::string name, const EncoderConfig& c,
                           std::uint64_t split_seed) {
  std::mt19937_64 rng(split_seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  const std::size_t n = rows.size();
  const std::size_t n_train = n * 7 / 10;
  const std::size_t n_dev = n / 10;
  TaskSpec t{id, std::move(name), {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    auto e = encode_example(rows[i], c);
    if (i < n_train) t.train.push_back(std::move(e));
    else if (i < n_train + n_dev) t.dev.push_back(std::move(e));
    else t.test.push_back(std::move(e));
  }
  return t;
}

inline TaskSpec load_tsv_task(const std::filesystem::path& path, const EncoderConfig& c, std::uint64_t split_seed,
                              int id = 1) {
  return split_task(read_tsv(path), id, path.stem().string(), c, split_seed);
}

/// Manifest: one task per line, "path" or "name<whitespace>path"; '#' starts a
/// comment. Relative paths resolve against the manifest's directory.
inline TaskStream load_manifest(const std::filesystem::path& manifest, const EncoderConfig& c, std::uint64_t split_seed) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  TaskStream s;
  s.seed = split_seed;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string a, b;
    if (!(ls >> a)) continue;
    ls >> b;
    std::filesystem::path p = b.empty() ? a : b;
    if (p.is_relative()) p = manifest.parent_path() / p;
    const int id = static_cast<int>(s.tasks.size()) + 1;
    TaskSpec t = load_tsv_task(p, c, split_seed, id);
    if (!b.empty()) t.name = a;
    s.order.push_back(s.tasks.size());
    s.tasks.push_back(std::move(t));
  }
  if (s.tasks.empty()) throw DataError("manifest lists no tasks: " + manifest.string());
  return s;
}

inline void write_tsv(const std::filesystem::path& path, const std::vector<RawExample>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows) out << r.label << '\t' << r.text << '\n';
}

/// Builds the stream a RunConfig describes (synthetic or manifest), applying
/// the optional task order.
inline TaskStream build_stream(const RunConfig& cfg) {
  TaskStream s;
  if (cfg.stream.kind == StreamSpec::Kind::synthetic) {
    s = generate_synthetic_stream(cfg.stream.tasks, cfg.stream.data_seed, cfg.stream.shared_signal,
                                  cfg.stream.domain_drift, cfg.encoder, cfg.stream.train_size, cfg.stream.dev_size,
                                  cfg.stream.test_size);
  } else {
    s = load_manifest(cfg.stream.manifest, cfg.encoder, cfg.stream.split_seed);
  }
  if (!cfg.stream.order.empty()) s = permute_stream(s, cfg.stream.order);
  return s;
}

}  // namespace iprls
