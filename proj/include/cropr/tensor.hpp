// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with eager reverse-mode differentiation.
//
// A Tensor is a cheap handle to a node of the recording graph. Operations
// whose inputs require gradients record their parents and a backward
// closure; everything else is a plain value. A graph and its tensors belong
// to one thread.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cropr/errors.hpp"

namespace cropr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Vec<Scalar> value;
  Vec<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(const TensorNode&)> backward;

  bool is_leaf() const { return parents.empty(); }

  void accumulate(const Vec<Scalar>& delta) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = delta;
    } else {
      grad += delta;
    }
  }
  Vec<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Vec<Scalar>::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;
  using Vector = Vec<Scalar>;
  using Matrix = RowMat<Scalar>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Vector v = Vector::Zero(shape_numel(shape));
    return from(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor full(Shape shape, Scalar fill, bool requires_grad = false) {
    Vector v = Vector::Constant(shape_numel(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor from(Shape shape, Vector data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor from(Shape shape, std::initializer_list<Scalar> data, bool requires_grad = false) {
    Vector v(static_cast<Index>(data.size()));
    Index i = 0;
    for (Scalar x : data) v[i++] = x;
    return from(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor from_matrix(const Matrix& m, bool requires_grad = false) {
    Vector v = Eigen::Map<const Vector>(m.data(), m.size());
    return from({m.rows(), m.cols()}, std::move(v), requires_grad);
  }
  static Tensor scalar(Scalar x, bool requires_grad = false) {
    return from(Shape{}, Vector::Constant(1, x), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    return node_->shape.at(static_cast<std::size_t>(axis));
  }
  Index numel() const { return node_->value.size(); }

  const Vector& value() const { return node_->value; }
  // Direct mutation bypasses the graph; meant for parameter updates and
  // finite-difference probes on leaves.
  Vector& mutable_value() { return node_->value; }

  // Rows are all leading axes flattened, columns the last axis.
  ConstMatrixMap matrix() const {
    Index cols = rank() == 0 ? 1 : dim(-1);
    Index rows = cols == 0 ? 0 : numel() / cols;
    return ConstMatrixMap(node_->value.data(), rows, cols);
  }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  Scalar operator()(Index i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zeros when nothing has flowed in.
  Vector grad() const {
    return has_grad() ? node_->grad : Vector::Zero(numel());
  }
  void zero_grad() { node_->grad.resize(0); }
  const char* op_name() const { return node_->op; }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Detached deep copy: same values, no history, no gradient.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), value(), requires_grad);
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered record of the nodes a scalar depends on.
template <typename Scalar>
class Graph {
 public:
  using Node = TensorNode<Scalar>;

  /// Nodes reachable from `root` through gradient-carrying edges, parents
  /// before children.
  static Graph trace(const Tensor<Scalar>& root);

  const std::vector<Node*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node*> order_;
};

/// Populates grad on every requires-grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls; the same loss cannot be
/// back-propagated twice.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

namespace detail {
inline thread_local bool grad_recording = true;
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Creates an op result. When no parent needs a gradient the history is
/// dropped and the result is a plain value.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Vec<Scalar> value,
                           std::vector<Tensor<Scalar>> parents, const char* op,
                           std::function<void(const TensorNode<Scalar>&)> backward) {
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_recording)
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

}  // namespace detail

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

extern template class Graph<float>;
extern template class Graph<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace cropr
