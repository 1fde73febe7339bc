#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "alignps/tensor.hpp"

namespace alignps {

/// Reverse-mode autodiff over a dynamically built graph. Each forward op
/// allocates a node holding the result value and a closure that routes the
/// node's gradient to its inputs. Leaves with requires_grad accumulate into
/// a persistent grad buffer (zeroed by the optimizer between steps).
template <typename T>
struct VarNode {
  TensorT<T> value;
  TensorT<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<VarNode<T>>> inputs;
  std::function<void(VarNode<T> &)> backward_fn;

  TensorT<T> &grad_buf() {
    if (grad.numel() == 0) grad = TensorT<T>(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.numel() != 0) grad.fill(T(0));
  }
};

template <typename T>
using Var = std::shared_ptr<VarNode<T>>;

template <typename T>
Var<T> make_leaf(TensorT<T> value, bool requires_grad = true) {
  auto node = std::make_shared<VarNode<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

template <typename T>
Var<T> make_const(TensorT<T> value) {
  return make_leaf<T>(std::move(value), false);
}

template <typename T>
bool any_requires_grad(const std::vector<Var<T>> &inputs) {
  for (const auto &v : inputs)
    if (v && v->requires_grad) return true;
  return false;
}

/// Create an op node. backward_fn is dropped when no input needs gradients,
/// so inference-only forwards carry no backward state.
template <typename T>
Var<T> make_op(TensorT<T> value, std::vector<Var<T>> inputs,
               std::function<void(VarNode<T> &)> backward_fn) {
  auto node = std::make_shared<VarNode<T>>();
  node->value = std::move(value);
  node->requires_grad = any_requires_grad(inputs);
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}

/// Run backward from a scalar root; seeds d(root)/d(root) = 1.
template <typename T>
void backward(const Var<T> &root) {
  APS_CHECK(root && root->value.numel() == 1, "backward root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS to get a topological order.
  std::vector<VarNode<T> *> topo;
  std::unordered_set<VarNode<T> *> visited;
  std::vector<std::pair<VarNode<T> *, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto &[node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      VarNode<T> *child = node->inputs[idx].get();
      ++idx;
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buf().fill(T(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    VarNode<T> *node = *it;
    if (node->backward_fn && node->grad.numel() != 0) node->backward_fn(*node);
  }
}

/// Ordered parameter registry; iteration order is construction order, which
/// keeps optimizer updates and checkpoint layout deterministic.
template <typename T>
struct ParamSet {
  std::vector<std::pair<std::string, Var<T>>> items;

  void add(const std::string &key, const Var<T> &v) {
    APS_CHECK(v != nullptr, "null parameter: " + key);
    items.emplace_back(key, v);
  }
  void zero_grad() {
    for (auto &kv : items) kv.second->zero_grad();
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto &kv : items) n += kv.second->value.numel();
    return n;
  }
};

}  // namespace alignps
