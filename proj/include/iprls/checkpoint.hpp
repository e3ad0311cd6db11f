#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iprls/config_io.hpp"
#include "iprls/engine.hpp"

namespace iprls {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'I', 'P', 'R', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
  template <class U>
  void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

private:
  std::string buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  template <class U>
  U get() {
    static_assert(std::is_unsigned_v<U>);
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  bool done() const { return pos_ == data_.size(); }

private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes the learner (config, every named tensor as f32, ownership map
/// and prune history) into the little-endian checkpoint layout.
template <class T>
std::string checkpoint_bytes(const Learner<T>& learner) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(config_to_text(learner.config()));
  const OwnershipMap& owners = learner.owners();
  w.put(static_cast<std::uint32_t>(owners.tasks_completed()));
  w.put(static_cast<std::uint8_t>(learner.model().with_prf()));
  w.put(static_cast<std::uint8_t>(owners.shared()));

  std::vector<std::pair<std::string, const Tensor<T>*>> records;
  learner.model().for_each_parameter([&](const std::string& name, const Tensor<T>& x) { records.emplace_back(name, &x); });
  w.put(static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, x] : records) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(x->shape().size()));
    for (auto d : x->shape()) w.put(static_cast<std::uint64_t>(d));
    for (std::size_t i = 0; i < x->size(); ++i) w.put_f32(static_cast<float>((*x)[i]));
  }

  w.put(static_cast<std::uint32_t>(owners.slots()));
  for (const auto& slot : owners.raw()) {
    w.put(static_cast<std::uint64_t>(slot.size()));
    for (OwnerLabel l : slot) w.put(static_cast<std::uint16_t>(l));
  }
  w.put(static_cast<std::uint32_t>(owners.history().size()));
  for (const auto& h : owners.history()) {
    w.put(static_cast<std::uint32_t>(h.task));
    w.put(static_cast<std::uint64_t>(h.slot));
    w.put(static_cast<std::uint64_t>(h.candidates));
    w.put(static_cast<std::uint64_t>(h.freed));
  }
  return w.bytes();
}

template <class T>
void save_checkpoint(const Learner<T>& learner, const std::filesystem::path& path) {
  if (learner.owners().active_task() != 0) throw CheckpointError("cannot checkpoint in the middle of a task");
  const std::string bytes = checkpoint_bytes(learner);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

/// Rebuilds a learner from checkpoint bytes. Every stored record must match a
/// tensor of the reconstructed model by name and shape, and vice versa.
template <class T>
Learner<T> learner_from_bytes(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.get_bytes(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not an IPRLS checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  RunConfig cfg;
  apply_config_text(cfg, r.get_string());
  const int tasks = static_cast<int>(r.get<std::uint32_t>());
  const bool with_prf = r.get<std::uint8_t>() != 0;
  const bool shared = r.get<std::uint8_t>() != 0;
  if (with_prf == cfg.train.flags.no_prf) throw CheckpointError("residual-function flag disagrees with config");
  if (shared != cfg.train.flags.no_prune) throw CheckpointError("ownership mode disagrees with config");

  std::map<std::string, Tensor<T>> stored;
  const auto n_records = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_records; ++i) {
    std::string name = r.get_string();
    const auto ndim = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    Tensor<T> x(shape);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = static_cast<T>(r.get_f32());
    if (!stored.emplace(name, std::move(x)).second) throw CheckpointError("duplicate record " + name);
  }

  std::vector<std::vector<OwnerLabel>> labels(r.get<std::uint32_t>());
  for (auto& slot : labels) {
    slot.resize(static_cast<std::size_t>(r.get<std::uint64_t>()));
    for (auto& l : slot) l = r.get<std::uint16_t>();
  }
  std::vector<PruneOutcome> history(r.get<std::uint32_t>());
  for (auto& h : history) {
    h.task = static_cast<int>(r.get<std::uint32_t>());
    h.slot = static_cast<std::size_t>(r.get<std::uint64_t>());
    h.candidates = static_cast<std::size_t>(r.get<std::uint64_t>());
    h.freed = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  if (!r.done()) throw CheckpointError("trailing bytes after ownership section");

  Learner<T> learner(cfg);
  Encoder<T>& model = learner.model();
  for (int k = 1; k <= tasks; ++k) {
    model.add_task(k);
    model.snapshot_local(k);
  }
  if (tasks > 0) {
    for (auto& m : model.transforms()) snapshot_after_task(m);
  }
  std::size_t matched = 0;
  model.for_each_parameter([&](const std::string& name, Tensor<T>& x) {
    auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks record " + name);
    if (it->second.shape() != x.shape()) throw CheckpointError("shape mismatch for record " + name);
    x = std::move(it->second);
    ++matched;
  });
  if (matched != stored.size()) throw CheckpointError("checkpoint has records the model does not know");

  const auto sizes = model.slot_sizes();
  if (labels.size() != sizes.size()) throw CheckpointError("ownership slot count mismatch");
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    if (labels[s].size() != sizes[s]) throw CheckpointError("ownership size mismatch in slot " + std::to_string(s));
  }
  learner.owners().restore(std::move(labels), tasks, shared, std::move(history));
  return learner;
}

template <class T>
Learner<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return learner_from_bytes<T>(ss.str());
}

/// Observer that writes `task<k>.ckpt` into a directory after every task.
template <class T>
class CheckpointWriter : public EngineObserver<T> {
public:
  explicit CheckpointWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }
  void after_task(const Learner<T>& learner, int task) override {
    const auto path = dir_ / ("task" + std::to_string(task) + ".ckpt");
    save_checkpoint(learner, path);
    written_.push_back(path);
  }
  const std::vector<std::filesystem::path>& written() const { return written_; }

private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> written_;
};

}  // namespace iprls
