#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unvalley/tensor.hpp"

namespace unvalley {
namespace ad {

// Reverse-mode autodiff over a dynamic graph. Nodes are created by the op
// functions in ops.hpp; a node that depends on no differentiable input is a
// plain constant with no parents, so detached branches (frozen generators,
// fixed loss backbones) never allocate gradient buffers.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (!has_grad) {
      grad = Tensor::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }

  void accum_grad(const Tensor& g) {
    UNVALLEY_CHECK(g.same_shape(value), ShapeError, "gradient shape ", shape_str(g.shape()),
                   " does not match value shape ", shape_str(value.shape()));
    ensure_grad().add_(g);
  }
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;

  explicit Var(Tensor value, bool requires_grad = false) : n_(std::make_shared<Node>()) {
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
    n_->seq = next_seq();
  }

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var leaf(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  Tensor& mutable_value() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return n_ && n_->has_grad; }
  const Tensor& grad() const {
    UNVALLEY_CHECK(has_grad(), Error, "grad() called before backward reached this node");
    return n_->grad;
  }

  void zero_grad() {
    if (n_) {
      n_->has_grad = false;
      n_->grad = Tensor();
    }
  }

  const NodePtr& node() const { return n_; }

 private:
  NodePtr n_;
};

// Creates an op node. If no input requires a gradient the result is a
// constant: no parents are recorded and backward never visits it.
inline Var make_op(Tensor value, const std::vector<Var>& inputs,
                   std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  Var out(std::move(value), needs);
  if (needs) {
    auto& n = *out.node();
    n.parents.reserve(inputs.size());
    for (const auto& in : inputs) n.parents.push_back(in.node());
    n.backprop = std::move(backprop);
  }
  return out;
}

// Runs reverse accumulation from a scalar root. Reachable differentiable
// nodes are replayed in reverse creation order, which is a valid topological
// order for a dynamically built graph.
inline void backward(const Var& root) {
  UNVALLEY_CHECK(root.defined() && root.value().numel() == 1, ShapeError,
                 "backward requires a defined scalar root");
  UNVALLEY_CHECK(root.requires_grad(), Error,
                 "backward on a constant: no input requires a gradient");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  root.node()->ensure_grad().fill(1.0);
  for (Node* n : order) {
    if (n->has_grad && n->backprop) n->backprop(*n);
  }
}

// Detached view: same values, constant in any downstream graph.
inline Var detach(const Var& v) { return Var::constant(v.value()); }

}  // namespace ad

using ad::Var;

}  // namespace unvalley
