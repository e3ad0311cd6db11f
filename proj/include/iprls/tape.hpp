#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <utility>

#include "iprls/tensor.hpp"

namespace iprls {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Records a computation as it runs and replays it backwards to accumulate
/// gradients. Single-threaded; node storage is a deque so references to
/// recorded values stay valid while new nodes are appended.
template <class T>
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// A differentiable input.
  Var leaf(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Records an op result. The backward closure is dropped when no input
  /// needs a gradient, so constant subgraphs cost nothing on the way back.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to v; zeros when v
  /// did not participate.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  /// Mutable gradient buffer, allocated zero-filled on first use.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return node(v).has_grad; }

  /// Reverse sweep from a scalar loss. Each recorded op runs at most once.
  void backward(Var loss) {
    if (backward_done_) throw std::logic_error("backward() already ran on this tape");
    const Node& l = node(loss);
    if (l.value.size() != 1) {
      throw ShapeError("backward() requires a scalar loss, got shape " + to_string(l.value.shape()));
    }
    backward_done_ = true;
    grad_buffer(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, false, needs, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace iprls
