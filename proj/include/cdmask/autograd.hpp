// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cdmask/tensor.hpp"

namespace cdmask::ag {

/// Reverse-mode autodiff over a define-by-run tape. A Var is a shared handle
/// to a graph node holding the forward value, the accumulated gradient, and a
/// closure that pushes gradients into its parents.
template <typename T>
class Var {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<Var> parents;
    // Reads this node's accumulated grad and adds contributions to parents.
    std::function<void(Node&)> backward_fn;
  };

  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var make(Tensor<T> value, std::vector<Var> parents,
                  std::function<void(Node&)> backward_fn) {
    Var v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(value);
    bool req = false;
    for (const Var& p : parents) req = req || p.requires_grad();
    if (req && !no_grad_depth()) {
      v.node_->requires_grad = true;
      v.node_->parents = std::move(parents);
      v.node_->backward_fn = std::move(backward_fn);
    }
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Tensor<T>& grad() const { return node_->grad; }

  void zero_grad() const {
    node_->grad = Tensor<T>();
    node_->has_grad = false;
  }

  /// Accumulates `g` into this node's gradient buffer.
  void accum_grad(const Tensor<T>& g) const {
    if (!node_->requires_grad) return;
    if (!node_->has_grad) {
      node_->grad = g;
      node_->has_grad = true;
    } else {
      node_->grad.add_(g);
    }
  }

  bool has_grad() const { return node_->has_grad; }

  /// Same value, severed from the graph.
  Var detach() const { return Var(node_->value, false); }

  /// Runs backpropagation from this (scalar) variable.
  void backward() const {
    check(node_->value.numel() == 1, "backward: root must be scalar");
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    build_topo(node_.get(), topo, visited);
    accum_grad(Tensor<T>::scalar(T(1)));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->has_grad) n->backward_fn(*n);
    }
  }

  Node* node() const { return node_.get(); }

  /// Entering no-grad scope makes every op produce detached constants.
  /// Used for inference and for matching-cost evaluation.
  struct NoGradGuard {
    NoGradGuard() { ++no_grad_depth(); }
    ~NoGradGuard() { --no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
  };

 private:
  static int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
  }

  static void build_topo(Node* root, std::vector<Node*>& topo,
                         std::unordered_set<Node*>& visited) {
    // Iterative postorder: a node is appended after all of its parents.
    std::vector<std::pair<Node*, size_t>> stack;
    if (visited.insert(root).second) stack.push_back({root, 0});
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].node();
        if (p && p->requires_grad && visited.insert(p).second)
          stack.push_back({p, 0});
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

}  // namespace cdmask::ag
