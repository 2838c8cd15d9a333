#pragma once

#include "grasp/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace grasp {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Handle to a value in the reverse-mode graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  /// Accumulated gradient; empty tensor if none has flowed here.
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds a result node. When recording is off, or no parent needs a gradient, the
/// result is a constant leaf and `backward` is dropped.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                        std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (grad_enabled() && any) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Gradient buffer of parent `i` if it participates, else nullptr.
template <typename Scalar>
Tensor<Scalar>* parent_grad(Node<Scalar>& self, std::size_t i) {
  auto& p = self.parents[i];
  return (p && p->requires_grad) ? &p->grad_buffer() : nullptr;
}

template <typename Scalar>
const Tensor<Scalar>& parent_value(const Node<Scalar>& self, std::size_t i) {
  return self.parents[i]->value;
}

/// Reverse sweep from a scalar root. Intermediate gradients are released as soon as
/// they have been propagated; leaf gradients accumulate.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().array().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (!node->backward) continue;
    if (node->grad.size() != 0) node->backward(*node);
    node->grad = Tensor<Scalar>();
  }
}

}  // namespace grasp
