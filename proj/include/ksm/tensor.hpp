// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ksm/errors.hpp"

namespace ksm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
class Tensor;

/// Receives the output gradient and one accumulator per op input. An
/// accumulator is null when that input does not require a gradient.
template <std::floating_point T>
using BackwardFn =
    std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

namespace detail {

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
};

template <std::floating_point T>
void check_finite([[maybe_unused]] const char* op, [[maybe_unused]] std::span<const T> values) {
#ifdef KSM_CHECK_FINITE
  for (T v : values) {
    if (!std::isfinite(v)) throw InvariantError(std::string("non-finite value produced by ") + op);
  }
#endif
}

}  // namespace detail

/// Dense row-major array with a handle onto the reverse-mode tape. Copies
/// share storage; use clone() or detach() for an independent buffer.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<T>(numel_of(shape), T(0)), requires_grad) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Only leaves may toggle; enabling allocates a zeroed accumulator.
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->data.size(), T(0));
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  bool has_grad() const { return node_->requires_grad && !node_->grad.empty(); }
  std::span<T> grad() {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  std::span<const T> grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Same values, fresh leaf, no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  const char* op_name() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

 private:
  template <std::floating_point U>
  friend Tensor<U> make_op(const char*, Shape, std::vector<U>, const std::vector<Tensor<U>>&,
                           BackwardFn<U>);

  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node<T>> node_;
};

/// Records a differentiable operation. This is the extension point used by
/// every engine op and by the custom mask rules: supply the forward values
/// and a closure that maps the output gradient onto the input accumulators.
template <std::floating_point T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError(std::string(name) + ": output length does not match shape " +
                         shape_str(shape));
  }
  detail::check_finite<T>(name, data);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = name;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; the tape
/// below `loss` is released afterwards.
template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any trainable tensor");

  using NodePtr = detail::Node<T>*;
  // owning handles keep every node alive while the tape is torn down
  std::vector<std::shared_ptr<detail::Node<T>>> order;
  std::unordered_set<NodePtr> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node<T>>, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->inputs.size()) {
      auto child = top.first->inputs[top.second++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  NodePtr root = loss.node().get();
  if (root->grad.size() != root->data.size()) root->grad.assign(root->data.size(), T(0));
  root->grad[0] += T(1);

  std::vector<std::vector<T>*> sinks;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = it->get();
    if (node->is_leaf()) continue;
    sinks.clear();
    for (auto& in : node->inputs) {
      if (!in->requires_grad) {
        sinks.push_back(nullptr);
        continue;
      }
      if (in->grad.size() != in->data.size()) in->grad.assign(in->data.size(), T(0));
      sinks.push_back(&in->grad);
    }
    node->backward(std::span<const T>(node->grad), std::span<std::vector<T>* const>(sinks));
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward = nullptr;
    node->inputs.clear();
  }
}

}  // namespace ksm
