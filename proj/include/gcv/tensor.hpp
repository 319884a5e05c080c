// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gcv/error.hpp"
#include "gcv/rng.hpp"

namespace gcv {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables trace recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorImpl;

/// One recorded primitive: its inputs and the rule that pushes the output
/// gradient back into them.
struct TraceNode {
  const char* primitive = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<TraceNode> producer;

  bool is_leaf() const { return producer == nullptr; }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Dense row-major tensor of doubles with optional reverse-mode tracing.
/// Copies are shallow (shared storage); values are never mutated by
/// primitives, only by explicit in-place updates such as optimizer steps.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor: shape " + gcv::to_string(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " + std::to_string(data.size()));
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + gcv::to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor eye(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
  }
  static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
    const auto n = numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return Tensor(std::move(shape), std::move(v));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + gcv::to_string(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!impl_->is_leaf()) throw StateError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient accumulator; zeros when nothing has been accumulated yet.
  Tensor grad() const {
    if (impl_->grad.empty()) return zeros(shape());
    return Tensor(shape(), impl_->grad);
  }
  std::span<const double> grad_data() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Same values, no trace, no grad.
  Tensor detach() const { return Tensor(shape(), impl_->data); }
  Tensor clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const char* primitive, std::span<const double> v) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NumericError(std::string("numeric overflow in ") + primitive + ": non-finite value at index " +
                         std::to_string(i));
}

/// Builds the output of a primitive, validating finiteness and recording a
/// trace node when any input participates in differentiation.
inline Tensor make_result(const char* primitive, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(TensorImpl& out)> backward) {
  check_finite(primitive, data);
  Tensor out(std::move(shape), std::move(data));
  bool record = false;
  if (grad_enabled())
    for (const auto& t : inputs) record = record || t.requires_grad();
  if (record) {
    auto node = std::make_shared<TraceNode>();
    node->primitive = primitive;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->producer = std::move(node);
  }
  return out;
}

inline Tensor make_result(const char* primitive, Shape shape, std::vector<double> data,
                          const std::vector<Tensor>& inputs, std::function<void(TensorImpl& out)> backward) {
  check_finite(primitive, data);
  Tensor out(std::move(shape), std::move(data));
  bool record = false;
  if (grad_enabled())
    for (const auto& t : inputs) record = record || t.requires_grad();
  if (record) {
    auto node = std::make_shared<TraceNode>();
    node->primitive = primitive;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->producer = std::move(node);
  }
  return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar output. Leaf gradients accumulate across
/// calls; interior gradients are scratch and released once propagated.
inline void backprop(const Tensor& output) {
  if (!output.defined() || output.size() != 1)
    throw ShapeError("backprop: output must be a scalar, got shape " +
                     (output.defined() ? to_string(output.shape()) : std::string("<undefined>")));
  if (output.is_leaf())
    throw StateError("backprop: output has no recorded trace");

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(output.impl().get(), 0);
  visited.insert(output.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->producer && next < node->producer->inputs.size()) {
      TensorImpl* child = node->producer->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  output.impl()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->is_leaf()) continue;
    n->producer->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace gcv
