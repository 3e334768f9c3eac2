#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "ugdiff/tensor.hpp"

namespace ugdiff {

// Reverse-mode tape. Every op produces a Node holding its value; when grad
// mode is on and some parent requires gradients, the node also keeps its
// parents and a pull-style backprop closure. backward() runs the closures in
// reverse topological order.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>(value.shape);
  }

  void accumulate(const Tensor<T>& g) {
    ensure_grad();
    for (size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += g.data[i];
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline thread_local int g_grad_mode = 1;
}

inline bool grad_enabled() { return detail::g_grad_mode != 0; }

struct NoGradGuard {
  NoGradGuard() : saved_(detail::g_grad_mode) { detail::g_grad_mode = 0; }
  ~NoGradGuard() { detail::g_grad_mode = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  int saved_;
};

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad && grad_enabled();
  return n;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool need = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p && p->requires_grad) need = true;
  }
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Backpropagates from a scalar loss. Iterative topological sort; graphs from
// long sampling loops would overflow a recursive walk.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss) throw std::invalid_argument("backward: null variable");
  if (loss->value.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss->value.shape));
  if (!loss->requires_grad)
    throw std::runtime_error("backward: no graph attached to loss (forward not run in training mode)");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* n;
    size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.get(), 0});
  visited.insert(loss.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.n->parents.size()) {
      Node<T>* c = f.n->parents[f.next_child++].get();
      if (c && c->requires_grad && !visited.count(c)) {
        visited.insert(c);
        stack.push_back({c, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad.data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
  }
}

}  // namespace ugdiff
