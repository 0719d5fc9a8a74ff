#pragma once

// Reverse-mode tensor core. A Tensor is a shared handle to a graph node;
// operations create new nodes that remember their parents and a backward
// closure. Calling backward() on a scalar walks the graph in reverse
// topological order and accumulates gradients into every node that
// requires them.

#include <algorithm>
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

#include "geolab/error.hpp"

namespace geolab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_size(shape)) {
      throw Error(ErrorKind::ShapeMismatch, "tensor of shape " + shape_string(shape) + " given " +
                                                std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T item() const { return node_->value.at(0); }
  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& grad_storage() { return node_->ensure_grad(); }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Seeds d(self)/d(self) = 1 and back-propagates. Requires a one-element tensor.
  void backward() {
    if (size() != 1) {
      throw Error(ErrorKind::ShapeMismatch,
                  "backward() needs a scalar, got " + shape_string(shape()));
    }
    if (!requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; `order` ends up parents-before-children.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The node requires grad iff any input does; only
/// grad-carrying parents are retained.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      any = true;
      out.node()->parents.push_back(in.node_ptr());
    }
  }
  if (any) {
    out.set_requires_grad(true);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      any = true;
      out.node()->parents.push_back(in.node_ptr());
    }
  }
  if (any) {
    out.set_requires_grad(true);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

/// A named trainable tensor. Frozen parameters are skipped by optimizers
/// and do not record gradients.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool frozen = false;

  void set_frozen(bool flag) {
    frozen = flag;
    tensor.set_requires_grad(!flag);
  }
};

/// Non-trainable per-model state (batchnorm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T> values;
};

}  // namespace geolab::ad
