#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "audistill/error.hpp"

namespace audistill::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
class BasicTensor;

/// Which inputs of a node need a gradient during the current backward pass.
using NeedMask = std::vector<bool>;

/// Backward rule: given the node's own output and the gradient flowing into
/// it, return one gradient per input (undefined tensors where not needed).
/// Rules are written with differentiable primitives so the returned
/// gradients can themselves be part of a graph.
template <class T>
using BackwardFn = std::function<std::vector<BasicTensor<T>>(
    const BasicTensor<T>& out, const BasicTensor<T>& grad, const NeedMask& needs)>;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<BasicTensor<T>> inputs;
  BackwardFn<T> backward;
  std::uint64_t seq = 0;  // position on the thread's tape
  const char* op = "leaf";
};

inline std::uint64_t next_tape_position() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

/// Scoped override of graph recording for the current thread.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_mode_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Immutable dense tensor, row-major. Copies share storage; every operation
/// produces a new tensor, so sharing is never observable.
template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (ad::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_tape_position();
  }

  static BasicTensor full(const Shape& shape, T value, bool requires_grad = false) {
    return BasicTensor(shape, std::vector<T>(ad::numel(shape), value), requires_grad);
  }
  static BasicTensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static BasicTensor ones(const Shape& shape) { return full(shape, T(1)); }
  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  std::uint64_t tape_position() const { return node_->seq; }

  /// Same values, cut from the graph.
  BasicTensor detach(bool requires_grad = false) const {
    return BasicTensor(node_->shape, node_->data, requires_grad);
  }

  const std::shared_ptr<NodeT>& node() const { return node_; }
  static BasicTensor from_node(std::shared_ptr<NodeT> n) {
    BasicTensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<NodeT> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Records an operation result on the tape. The node keeps its inputs and
/// backward rule only when grad mode is on and some input needs a gradient.
template <class T>
BasicTensor<T> record(Shape shape, std::vector<T> data, std::vector<BasicTensor<T>> inputs,
                      BackwardFn<T> backward, const char* op) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  auto& node = *out.node();
  node.op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node.requires_grad = true;
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  return out;
}

}  // namespace audistill::ad
