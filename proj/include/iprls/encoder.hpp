#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "iprls/config.hpp"
#include "iprls/meanfield.hpp"
#include "iprls/ops.hpp"
#include "iprls/ownership.hpp"
#include "iprls/tape.hpp"
#include "iprls/tensor.hpp"

namespace iprls {

/// Reserved token ids.
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kFirstWordId = 3;

/// Regularized transform kinds inside one encoder layer, in slot order.
enum class TransformKind : std::size_t { query = 0, key, value, concat, ff_in, ff_out };
inline constexpr std::size_t kTransformsPerLayer = 6;

inline const char* to_string(TransformKind k) {
  static constexpr const char* names[] = {"wq", "wk", "wv", "wc", "wf1", "wf2"};
  return names[static_cast<std::size_t>(k)];
}

inline std::size_t slot_of(std::size_t layer, TransformKind kind) {
  return layer * kTransformsPerLayer + static_cast<std::size_t>(kind);
}

/// The transform whose outputs feed `kind`'s inputs (-1 when the input is the
/// frozen embedding). Used for REG1's lower-layer uncertainty term.
inline int lower_slot(std::size_t layer, TransformKind kind) {
  switch (kind) {
    case TransformKind::query:
    case TransformKind::key:
    case TransformKind::value:
      return layer == 0 ? -1 : static_cast<int>(slot_of(layer - 1, TransformKind::ff_out));
    case TransformKind::concat: return static_cast<int>(slot_of(layer, TransformKind::value));
    case TransformKind::ff_in: return static_cast<int>(slot_of(layer, TransformKind::concat));
    case TransformKind::ff_out: return static_cast<int>(slot_of(layer, TransformKind::ff_in));
  }
  return -1;
}

/// Shapes of the regularized transforms of one layer, in slot order.
inline std::array<std::pair<std::size_t, std::size_t>, kTransformsPerLayer> transform_shapes(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = c.ff_width();
  return {{{d, d}, {d, d}, {d, d}, {d, d}, {f, d}, {d, f}}};
}

/// Unregularized per-layer parameters: FFN biases and the two layer norms.
template <class T>
struct LayerLocal {
  Tensor<T> b1, b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  static LayerLocal init(const EncoderConfig& c) {
    const std::size_t d = c.d_model;
    return {Tensor<T>(Shape{c.ff_width()}), Tensor<T>(Shape{d}), Tensor<T>(Shape{d}, T(1)),
            Tensor<T>(Shape{d}),            Tensor<T>(Shape{d}, T(1)), Tensor<T>(Shape{d})};
  }

  template <class F>
  void for_each(F&& f) {
    f("b1", b1); f("b2", b2); f("ln1_gain", ln1_gain); f("ln1_bias", ln1_bias); f("ln2_gain", ln2_gain); f("ln2_bias", ln2_bias);
  }
  template <class F>
  void for_each(F&& f) const {
    f("b1", b1); f("b2", b2); f("ln1_gain", ln1_gain); f("ln1_bias", ln1_bias); f("ln2_gain", ln2_gain); f("ln2_bias", ln2_bias);
  }
};

/// Task-specific parallel residual function: shared down/up projections plus a
/// low-dimensional attention block per layer (query, key, value, concat).
template <class T>
struct PrfParams {
  Tensor<T> down;  // d_p x d_m
  Tensor<T> up;    // d_m x d_p
  std::vector<std::array<Tensor<T>, 4>> attn;

  template <class Rng>
  static PrfParams init(const EncoderConfig& c, Rng& rng, T stddev = T(0.02)) {
    const std::size_t dm = c.d_model, dp = c.prf_width();
    PrfParams p{Tensor<T>::randn(Shape{dp, dm}, rng, stddev), Tensor<T>::randn(Shape{dm, dp}, rng, stddev), {}};
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      p.attn.push_back({Tensor<T>::randn(Shape{dp, dp}, rng, stddev), Tensor<T>::randn(Shape{dp, dp}, rng, stddev),
                        Tensor<T>::randn(Shape{dp, dp}, rng, stddev), Tensor<T>::randn(Shape{dp, dp}, rng, stddev)});
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = down.size() + up.size();
    for (const auto& a : attn) {
      for (const auto& w : a) n += w.size();
    }
    return n;
  }

  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("down"), self.down);
    f(std::string("up"), self.up);
    static constexpr const char* kinds[] = {"q", "k", "v", "c"};
    for (std::size_t l = 0; l < self.attn.size(); ++l) {
      for (std::size_t i = 0; i < 4; ++i) f("layer" + std::to_string(l) + "." + kinds[i], self.attn[l][i]);
    }
  }
};

template <class T>
struct TaskHead {
  Tensor<T> weight;  // n_classes x d_m
  Tensor<T> bias;

  template <class Rng>
  static TaskHead init(const EncoderConfig& c, Rng& rng) {
    return {Tensor<T>::randn(Shape{c.n_classes, c.d_model}, rng, T(0.02)), Tensor<T>(Shape{c.n_classes})};
  }
};

// ---------------------------------------------------------------------------
// Layer components on a tape. Sequences are packed row-wise; `segs` delimits
// them and attention never crosses a segment boundary.
// ---------------------------------------------------------------------------

/// Tape handles of one encoder layer's weights (already masked/sampled).
struct LayerVars {
  Var wq, wk, wv, wc, wf1, b1, wf2, b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct PrfVars {
  Var down, up;
  Var wq, wk, wv, wc;  // this layer's low-dimensional attention
};

template <class T>
Var attention_head(Tape<T>& t, Var h, Var wq_i, Var wk_i, Var wv_i, const std::vector<ops::Segment>& segs) {
  const std::size_t dh = t.value(wq_i).rows();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  return ops::attention(t, ops::linear(t, h, wq_i), ops::linear(t, h, wk_i), ops::linear(t, h, wv_i), 1, segs, scale);
}

/// MHA(h) = Wc [head_1, ..., head_n]; head i uses rows [i*dh, (i+1)*dh) of wq/wk/wv.
template <class T>
Var multi_head_attention(Tape<T>& t, Var h, Var wq, Var wk, Var wv, Var wc, std::size_t n_heads,
                         const std::vector<ops::Segment>& segs) {
  const std::size_t d = t.value(wq).rows();
  const T scale = T(1) / std::sqrt(static_cast<T>(d / n_heads));
  Var heads = ops::attention(t, ops::linear(t, h, wq), ops::linear(t, h, wk), ops::linear(t, h, wv), n_heads, segs, scale);
  return ops::linear(t, heads, wc);
}

/// MHAL(h) = LN(h + MHA(h)).
template <class T>
Var mhal(Tape<T>& t, Var h, const LayerVars& w, std::size_t n_heads, const std::vector<ops::Segment>& segs) {
  Var mha = multi_head_attention(t, h, w.wq, w.wk, w.wv, w.wc, n_heads, segs);
  return ops::layer_norm(t, ops::add(t, h, mha), w.ln1_gain, w.ln1_bias);
}

/// FFN = W2 g(W1 x + b1) + b2, applied to the MHAL output x.
template <class T>
Var ffn(Tape<T>& t, Var mhal_out, const LayerVars& w, Activation act) {
  Var hidden = ops::linear(t, mhal_out, w.wf1, w.b1);
  hidden = act == Activation::gelu ? ops::gelu(t, hidden) : ops::relu(t, hidden);
  return ops::linear(t, hidden, w.wf2, w.b2);
}

/// BL(h) = LN(MHAL(h) + FFN(h)).
template <class T>
Var base_layer(Tape<T>& t, Var h, const LayerVars& w, const EncoderConfig& c, const std::vector<ops::Segment>& segs) {
  Var a = mhal(t, h, w, c.n_heads, segs);
  Var f = ffn(t, a, w, c.activation);
  return ops::layer_norm(t, ops::add(t, a, f), w.ln2_gain, w.ln2_bias);
}

/// PRF(h) = W_up MHA_p(W_down h).
template <class T>
Var prf(Tape<T>& t, Var h, const PrfVars& p, std::size_t n_heads_p, const std::vector<ops::Segment>& segs) {
  Var low = ops::linear(t, h, p.down);
  Var att = multi_head_attention(t, low, p.wq, p.wk, p.wv, p.wc, n_heads_p, segs);
  return ops::linear(t, att, p.up);
}

/// BL_IPR(h) = LN(MHAL(h) + FFN(h) + PRF(h)); without a PRF it is BL(h).
template <class T>
Var ipr_layer(Tape<T>& t, Var h, const LayerVars& w, const PrfVars* p, const EncoderConfig& c,
              const std::vector<ops::Segment>& segs) {
  Var a = mhal(t, h, w, c.n_heads, segs);
  Var sum = ops::add(t, a, ffn(t, a, w, c.activation));
  if (p) sum = ops::add(t, sum, prf(t, h, *p, c.n_heads_prf, segs));
  return ops::layer_norm(t, sum, w.ln2_gain, w.ln2_bias);
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

inline std::size_t prf_parameter_count(const EncoderConfig& c) {
  const std::size_t dm = c.d_model, dp = c.prf_width();
  return 2 * dp * dm + c.n_layers * 4 * dp * dp;
}

inline std::size_t regularized_parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = c.ff_width();
  return c.n_layers * (4 * d * d + 2 * d * f);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Packed batch: rows of every (trimmed) sequence stacked, one segment each.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<std::size_t> positions;
  std::vector<ops::Segment> segments;
  std::vector<std::size_t> first_rows;
};

/// Maps ids outside the vocabulary to UNK, truncates to max_len and drops
/// trailing padding (padding is never attended to).
inline PackedBatch pack_batch(std::span<const std::vector<int>* const> seqs, const EncoderConfig& c) {
  PackedBatch b;
  for (const auto* s : seqs) {
    std::size_t len = std::min(s->size(), c.max_len);
    while (len > 1 && (*s)[len - 1] == kPadId) --len;
    if (len == 0) throw std::invalid_argument("empty token sequence");
    b.first_rows.push_back(b.tokens.size());
    b.segments.push_back({b.tokens.size(), len});
    for (std::size_t i = 0; i < len; ++i) {
      int id = (*s)[i];
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) id = kUnkId;
      b.tokens.push_back(id);
      b.positions.push_back(i);
    }
  }
  return b;
}

/// Per-transform weight treatment for one forward pass.
template <class T>
struct WeightPlan {
  std::vector<std::shared_ptr<const ByteMask>> keep;    // null -> all on
  std::vector<std::shared_ptr<const Tensor<T>>> noise;  // null -> mean weights
};

/// Maps parameter tensors to tape leaves (or constants when not training),
/// binding each tensor at most once.
template <class T>
class ParamBinder {
public:
  ParamBinder(Tape<T>& tape, bool differentiable) : tape_(tape), differentiable_(differentiable) {}

  Var operator()(const Tensor<T>& p) {
    auto it = vars_.find(&p);
    if (it != vars_.end()) return it->second;
    Var v = differentiable_ ? tape_.leaf(p) : tape_.constant(p);
    vars_.emplace(&p, v);
    return v;
  }

  /// Binds `p` to an existing tape variable (e.g. a gradient-check input).
  void bind_as(const Tensor<T>& p, Var v) {
    if (!vars_.emplace(&p, v).second) throw std::logic_error("ParamBinder: tensor already bound");
  }

  std::optional<Var> find(const Tensor<T>& p) const {
    auto it = vars_.find(&p);
    if (it == vars_.end()) return std::nullopt;
    return it->second;
  }

  Tape<T>& tape() { return tape_; }

private:
  Tape<T>& tape_;
  bool differentiable_;
  std::unordered_map<const Tensor<T>*, Var> vars_;
};

/// Transformer-encoder classifier with mean-field regularized transforms,
/// frozen embeddings, and per-task PRF adapters, heads and layer-local
/// parameter snapshots.
template <class T>
class Encoder {
public:
  Encoder(const EncoderConfig& cfg, const RegConfig& reg, bool with_prf, std::uint64_t seed)
      : cfg_(cfg), with_prf_(with_prf), seed_(seed) {
    cfg_.validate();
    reg.validate();
    std::mt19937_64 rng(seed);
    token_emb_ = Tensor<T>::randn(Shape{cfg_.vocab_size, cfg_.d_model}, rng, T(1));
    pos_emb_ = Tensor<T>::randn(Shape{cfg_.max_len, cfg_.d_model}, rng, T(0.1));
    const auto shapes = transform_shapes(cfg_);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      for (std::size_t k = 0; k < kTransformsPerLayer; ++k) {
        const auto kind = static_cast<TransformKind>(k);
        const auto [rows, cols] = shapes[k];
        const T stddev = T(1) / std::sqrt(static_cast<T>(cols));
        transforms_.emplace_back("layer" + std::to_string(l) + "." + to_string(kind),
                                 Tensor<T>::randn(Shape{rows, cols}, rng, stddev),
                                 static_cast<T>(reg.sigma_init_for(l)), l, lower_slot(l, kind));
      }
      local_.push_back(LayerLocal<T>::init(cfg_));
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  bool with_prf() const { return with_prf_; }
  std::uint64_t seed() const { return seed_; }
  int task_count() const { return static_cast<int>(heads_.size()); }

  std::vector<MeanFieldMatrix<T>>& transforms() { return transforms_; }
  const std::vector<MeanFieldMatrix<T>>& transforms() const { return transforms_; }
  MeanFieldMatrix<T>& transform(std::size_t layer, TransformKind k) { return transforms_.at(slot_of(layer, k)); }

  std::vector<std::size_t> slot_sizes() const {
    std::vector<std::size_t> s;
    for (const auto& m : transforms_) s.push_back(m.phi.size());
    return s;
  }

  std::vector<LayerLocal<T>>& live_local() { return local_; }
  const std::vector<LayerLocal<T>>& live_local() const { return local_; }

  TaskHead<T>& head(int task) { return heads_.at(index_of(task)); }
  const TaskHead<T>& head(int task) const { return heads_.at(index_of(task)); }
  PrfParams<T>* prf_params(int task) { return with_prf_ ? &prfs_.at(index_of(task)) : nullptr; }
  const PrfParams<T>* prf_params(int task) const { return with_prf_ ? &prfs_.at(index_of(task)) : nullptr; }

  const Tensor<T>& token_embedding() const { return token_emb_; }
  const Tensor<T>& position_embedding() const { return pos_emb_; }

  /// Allocates task k's head (and PRF); tasks are added in order.
  void add_task(int task) {
    if (task != task_count() + 1) throw std::logic_error("tasks must be added in order");
    std::seed_seq seq{static_cast<std::uint64_t>(seed_), static_cast<std::uint64_t>(task), std::uint64_t{0x7e5a}};
    std::mt19937_64 rng(seq);
    heads_.push_back(TaskHead<T>::init(cfg_, rng));
    if (with_prf_) prfs_.push_back(PrfParams<T>::init(cfg_, rng));
  }

  /// Stores the current layer-local parameters as task k's.
  void snapshot_local(int task) { local_snapshots_[task] = local_; }
  bool has_local_snapshot(int task) const { return local_snapshots_.count(task) > 0; }
  const std::vector<LayerLocal<T>>& local_for(int task) const {
    auto it = local_snapshots_.find(task);
    return it == local_snapshots_.end() ? local_ : it->second;
  }
  std::map<int, std::vector<LayerLocal<T>>>& local_snapshots() { return local_snapshots_; }

  /// Logits for a packed batch under task `task`'s head/PRF. Uses `local`
  /// layer parameters (live ones when null). Regularized transforms go through
  /// the mean-field sampler with the plan's masks/noise.
  Var forward(ParamBinder<T>& bind, const PackedBatch& batch, int task, const WeightPlan<T>& plan,
              const std::vector<LayerLocal<T>>* local = nullptr) const {
    Tape<T>& t = bind.tape();
    const auto& loc = local ? *local : local_;
    Var h = t.constant(embed(batch));
    const PrfParams<T>* p = prf_params(task);
    const TaskHead<T>& hd = head(task);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      auto w = [&](TransformKind k) { return weight_var(bind, slot_of(l, k), plan); };
      const auto& ll = loc.at(l);
      LayerVars lv{w(TransformKind::query), w(TransformKind::key), w(TransformKind::value), w(TransformKind::concat),
                   w(TransformKind::ff_in), bind(ll.b1), w(TransformKind::ff_out), bind(ll.b2),
                   bind(ll.ln1_gain), bind(ll.ln1_bias), bind(ll.ln2_gain), bind(ll.ln2_bias)};
      if (p) {
        PrfVars pv{bind(p->down), bind(p->up), bind(p->attn[l][0]), bind(p->attn[l][1]), bind(p->attn[l][2]),
                   bind(p->attn[l][3])};
        h = ipr_layer(t, h, lv, &pv, cfg_, batch.segments);
      } else {
        h = ipr_layer<T>(t, h, lv, nullptr, cfg_, batch.segments);
      }
    }
    Var cls = ops::gather_rows(t, h, batch.first_rows);
    return ops::linear(t, cls, bind(hd.weight), bind(hd.bias));
  }

  /// Deterministic eval-mode logits for task j with the given inference masks,
  /// using task j's layer-local snapshot when one exists.
  Tensor<T> logits(std::span<const std::vector<int>* const> seqs, int task, const WeightPlan<T>& plan) const {
    Tape<T> t;
    ParamBinder<T> bind(t, false);
    const PackedBatch batch = pack_batch(seqs, cfg_);
    return t.value(forward(bind, batch, task, plan, &local_for(task)));
  }

  Tensor<T> embed(const PackedBatch& b) const {
    const std::size_t d = cfg_.d_model;
    Tensor<T> x(Shape{b.tokens.size(), d});
    for (std::size_t r = 0; r < b.tokens.size(); ++r) {
      const T* te = token_emb_.raw() + static_cast<std::size_t>(b.tokens[r]) * d;
      const T* pe = pos_emb_.raw() + b.positions[r] * d;
      for (std::size_t j = 0; j < d; ++j) x[r * d + j] = te[j] + pe[j];
    }
    return x;
  }

  /// Visits every stored tensor with a stable name (checkpoint order).
  template <class F>
  void for_each_parameter(F&& f) {
    visit_all(*this, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit_all(*this, f);
  }

private:
  std::size_t index_of(int task) const {
    if (task < 1 || task > task_count()) throw std::out_of_range("unknown task id " + std::to_string(task));
    return static_cast<std::size_t>(task - 1);
  }

  Var weight_var(ParamBinder<T>& bind, std::size_t slot, const WeightPlan<T>& plan) const {
    const auto& m = transforms_[slot];
    auto keep = slot < plan.keep.size() ? plan.keep[slot] : nullptr;
    auto noise = slot < plan.noise.size() ? plan.noise[slot] : nullptr;
    Var phi = bind(m.phi);
    Var rho = noise ? bind(m.rho) : bind.tape().constant(m.rho);
    return ops::mean_field_weight(bind.tape(), phi, rho, std::move(keep), std::move(noise));
  }

  template <class Self, class F>
  static void visit_all(Self& self, F& f) {
    f(std::string("embed.token"), self.token_emb_);
    f(std::string("embed.pos"), self.pos_emb_);
    for (auto& m : self.transforms_) {
      f(m.name + ".phi", m.phi);
      f(m.name + ".rho", m.rho);
      if (m.phi_prev) f(m.name + ".phi_prev", *m.phi_prev);
      if (m.sigma_prev) f(m.name + ".sigma_prev", *m.sigma_prev);
    }
    visit_local(self.local_, "live", f);
    for (auto& [task, loc] : self.local_snapshots_) visit_local(loc, "task" + std::to_string(task), f);
    for (std::size_t i = 0; i < self.heads_.size(); ++i) {
      const std::string base = "task" + std::to_string(i + 1) + ".head.";
      f(base + "weight", self.heads_[i].weight);
      f(base + "bias", self.heads_[i].bias);
    }
    for (std::size_t i = 0; i < self.prfs_.size(); ++i) {
      const std::string base = "task" + std::to_string(i + 1) + ".prf.";
      self.prfs_[i].for_each([&](const std::string& n, auto& x) { f(base + n, x); });
    }
  }

  template <class Loc, class F>
  static void visit_local(Loc& loc, const std::string& prefix, F& f) {
    for (std::size_t l = 0; l < loc.size(); ++l) {
      loc[l].for_each([&](const char* n, auto& x) { f(prefix + ".layer" + std::to_string(l) + "." + n, x); });
    }
  }

  EncoderConfig cfg_;
  bool with_prf_;
  std::uint64_t seed_;
  Tensor<T> token_emb_;
  Tensor<T> pos_emb_;
  std::vector<MeanFieldMatrix<T>> transforms_;
  std::vector<LayerLocal<T>> local_;
  std::map<int, std::vector<LayerLocal<T>>> local_snapshots_;
  std::vector<TaskHead<T>> heads_;
  std::vector<PrfParams<T>> prfs_;
};

/// Eval-time weight plan for task j: inference masks, no noise.
template <class T>
WeightPlan<T> inference_plan(const OwnershipMap& owners, int task) {
  WeightPlan<T> plan;
  for (std::size_t s = 0; s < owners.slots(); ++s) {
    plan.keep.push_back(std::make_shared<const ByteMask>(owners.inference(s, task)));
  }
  return plan;
}

}  // namespace iprls
