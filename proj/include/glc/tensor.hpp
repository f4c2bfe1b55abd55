#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "glc/error.hpp"

namespace glc {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (const auto extent : shape) n *= extent;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One vertex of the autodiff tape. `backward_fn` reads this node's grad and
/// accumulates into the grads of `inputs`.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying node.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (glc::numel(shape) != static_cast<std::int64_t>(values.size())) {
      fail(ErrorKind::shape, "shape " + glc::to_string(shape) + " holds " +
                                 std::to_string(glc::numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
    }
    for (const auto extent : shape) {
      if (extent < 0) fail(ErrorKind::shape, "negative extent in " + glc::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = glc::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = glc::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::int64_t dim(std::int64_t axis) const {
    if (axis < 0) axis += rank();
    return node_->shape.at(static_cast<std::size_t>(axis));
  }

  std::span<const T> data() const { return node_->value; }

  /// Direct write access; meant for leaves (parameter updates, test fixtures).
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1) fail(ErrorKind::usage, "item() on tensor of shape " + glc::to_string(shape()));
    return node_->value[0];
  }

  T operator[](std::int64_t flat_index) const { return node_->value[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }

  /// Gradient values; zeros when nothing has been accumulated.
  std::vector<T> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<T>(node_->value.size(), T(0));
  }

  std::span<T> mutable_grad() { return node_->grad_buffer(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::string_view op() const { return node_->op; }

  /// Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds the output node of an op and wires it into the tape when any input
/// participates in differentiation.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string_view op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values));
  out.node()->op = op;
#ifndef NDEBUG
  for (const auto v : out.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      bool finite_inputs = true;
      for (const auto* in : inputs) {
        for (const auto x : in->data()) finite_inputs = finite_inputs && std::isfinite(static_cast<double>(x));
      }
      if (finite_inputs) fail(ErrorKind::numeric, std::string(op) + " produced a non-finite value");
      break;
    }
  }
#endif
  if (!grad_enabled()) return out;
  bool needs_grad = false;
  for (const auto* in : inputs) needs_grad = needs_grad || (in->defined() && in->requires_grad());
  if (!needs_grad) return out;
  out.node()->requires_grad = true;
  for (const auto* in : inputs) {
    if (in->defined() && in->requires_grad()) out.node()->inputs.push_back(in->node_ptr());
  }
  out.node()->backward_fn = std::move(backward_fn);
  return out;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string_view op,
                      const std::vector<Tensor<T>>& inputs, std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values));
  out.node()->op = op;
  if (!grad_enabled()) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;
  out.node()->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) out.node()->inputs.push_back(in.node_ptr());
  }
  out.node()->backward_fn = std::move(backward_fn);
  return out;
}

/// Gradient buffer of `t` when it participates, else nullptr.
template <class T>
T* grad_of(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer().data();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate (sum over all
/// paths) into every reachable tensor that requires grad. The recorded graph
/// is released as it is consumed.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    fail(ErrorKind::usage, "backward() needs a scalar loss, got shape " +
                               (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) fail(ErrorKind::usage, "loss is not connected to any tensor that requires grad");

  // owning pointers: releasing a node's inputs must not free nodes still queued
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{loss.node_ptr(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      std::shared_ptr<Node<T>> child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (node->backward_fn) {
      node->grad_buffer();
      node->backward_fn(*node);
      node->backward_fn = nullptr;
      node->inputs.clear();
    }
  }
}

}  // namespace glc
