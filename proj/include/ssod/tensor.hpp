/*
 * Copyright 2026 The SSOD Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense tensor with reverse-mode automatic differentiation.
//
// Every differentiable op records a node stamped with a per-thread creation
// counter. backward() collects the nodes reachable from the loss and visits
// them in reverse creation order, so independent graphs can live on
// different threads without sharing state.
//
// Tensor (f32) is what training uses; TensorD (f64) runs the same code for
// finite-difference gradient audits.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ssod/error.hpp"

namespace ssod {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorImpl;

namespace detail {

template <typename T>
struct Node {
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the gradient of the node's output and accumulates into inputs.
  std::function<void(std::span<const T>)> backward;
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<detail::Node<T>> node;

  void accumulate(std::span<const T> g) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ConfigError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor({}, {value}, requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const {
    if (size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient, or all zeros if nothing has been accumulated yet.
  std::vector<T> grad() const {
    return impl_->grad.empty() ? std::vector<T>(size(), T(0)) : impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Drops the recorded history; the tensor becomes a leaf.
  BasicTensor detach() const { return BasicTensor(shape(), impl_->data, false); }

  /// Leaf copy with elements converted to U.
  template <typename U>
  BasicTensor<U> cast(bool requires_grad = false) const {
    return BasicTensor<U>(shape(), std::vector<U>(impl_->data.begin(), impl_->data.end()), requires_grad);
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

// Builds the output of an op and, if any input needs a gradient, records
// its node. The backward closure must not capture the output.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::vector<BasicTensor<T>> inputs,
                           std::function<void(std::span<const T>)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  const bool needs = !grad_disabled() && std::any_of(inputs.begin(), inputs.end(),
                                 [](const BasicTensor<T>& t) { return t.requires_grad(); });
  if (needs) {
    auto node = std::make_shared<Node<T>>();
    node->seq = next_seq();
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
  }
  return out;
}

template <typename T>
void accumulate_if(const std::shared_ptr<TensorImpl<T>>& impl, std::span<const T> g) {
  if (impl->requires_grad) impl->accumulate(g);
}

}  // namespace detail

/// Suspends graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) {
    throw ConfigError("backward seed must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<TensorImpl<T>*> stack{loss.impl().get()};
  while (!stack.empty()) {
    TensorImpl<T>* t = stack.back();
    stack.pop_back();
    if (!t->node || !seen.insert(t).second) continue;
    order.push_back(t);
    for (auto& in : t->node->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->node->seq > b->node->seq; });

  const T one = T(1);
  loss.impl()->accumulate(std::span<const T>(&one, 1));
  for (TensorImpl<T>* t : order) {
    if (t->grad.empty()) continue;
    t->node->backward(t->grad);
  }
}

}  // namespace ssod
