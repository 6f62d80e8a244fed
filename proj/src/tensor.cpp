// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

namespace cropr {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
Graph<Scalar> Graph<Scalar>::trace(const Tensor<Scalar>& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  // Iterative post-order DFS.
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  auto& root = *loss.node();
  if (root.backward_done) {
    throw ContractError("backward already ran on this loss; rebuild the graph first");
  }
  if (!root.requires_grad) return;
  Graph<Scalar> graph = Graph<Scalar>::trace(loss);
  const auto& order = graph.nodes();
  // Intermediate gradients are per-pass scratch.
  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.resize(0);
  }
  root.accumulate(Vec<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf() || node->grad.size() == 0 || !node->backward) continue;
    node->backward(*node);
  }
  root.backward_done = true;
}

template class Graph<float>;
template class Graph<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace cropr
