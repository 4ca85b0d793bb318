#pragma once

#include <algorithm>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "audistill/autodiff/ops.hpp"
#include "audistill/autodiff/tensor.hpp"
#include "audistill/error.hpp"

namespace audistill::ad {

/// Reverse-mode gradients of a scalar `loss` with respect to each tensor in
/// `wrt`. Nodes are visited in reverse tape order and gradients accumulate
/// additively. Tensors the loss does not depend on get exact zeros. With
/// `create_graph` the returned gradients are recorded and can be
/// differentiated again.
template <class T>
std::vector<BasicTensor<T>> grad(const BasicTensor<T>& loss, const std::vector<BasicTensor<T>>& wrt,
                                 bool create_graph = false) {
  if (!loss.defined() || loss.numel() != 1) {
    throw PreconditionError("grad needs a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  using NodePtr = const detail::Node<T>*;

  std::unordered_set<NodePtr> targets;
  for (const auto& w : wrt) {
    if (!w.defined()) throw PreconditionError("grad: undefined tensor in wrt list");
    targets.insert(w.node().get());
  }

  // Every recorded node reachable from the loss.
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  std::unordered_set<NodePtr> seen;
  if (loss.requires_grad()) {
    std::vector<std::shared_ptr<detail::Node<T>>> stack{loss.node()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto n = std::move(stack.back());
      stack.pop_back();
      for (const auto& in : n->inputs) {
        if (in.requires_grad() && seen.insert(in.node().get()).second) stack.push_back(in.node());
      }
      nodes.push_back(std::move(n));
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });

  // A node is needed when some target lies on or below it.
  std::unordered_set<NodePtr> needed;
  for (const auto& n : nodes) {
    bool need = targets.count(n.get()) > 0;
    for (const auto& in : n->inputs) need = need || needed.count(in.node().get()) > 0;
    if (need) needed.insert(n.get());
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<NodePtr, BasicTensor<T>> grads;
  if (needed.count(loss.node().get())) {
    grads[loss.node().get()] = BasicTensor<T>::ones(loss.shape());
  }
  std::unordered_map<NodePtr, BasicTensor<T>> results;

  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const auto& n = *it;
    auto g_it = grads.find(n.get());
    if (g_it == grads.end()) continue;
    BasicTensor<T> g = std::move(g_it->second);
    grads.erase(g_it);
    if (targets.count(n.get())) results[n.get()] = g;
    if (!n->backward || n->inputs.empty()) continue;

    NeedMask mask(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = n->inputs[i].requires_grad() && needed.count(n->inputs[i].node().get()) > 0;
      any = any || mask[i];
    }
    if (!any) continue;
    const auto in_grads = n->backward(BasicTensor<T>::from_node(n), g, mask);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const auto& ig = in_grads.at(i);
      if (!ig.defined()) continue;
      NodePtr key = n->inputs[i].node().get();
      auto [slot, inserted] = grads.try_emplace(key, ig);
      if (!inserted) slot->second = add(slot->second, ig);
    }
  }

  std::vector<BasicTensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto r = results.find(w.node().get());
    out.push_back(r != results.end() ? r->second : BasicTensor<T>::zeros(w.shape()));
  }
  return out;
}

/// params - lr * d loss / d params, recorded on the tape so an outer loss
/// can be differentiated through the step (with respect to lr as well).
template <class T>
std::vector<BasicTensor<T>> sgd_step_differentiable(const std::vector<BasicTensor<T>>& params,
                                                    const BasicTensor<T>& loss,
                                                    const BasicTensor<T>& lr) {
  const auto grads = grad(loss, params, true);
  std::vector<BasicTensor<T>> next;
  next.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    next.push_back(sub(params[i], mul_scalar(grads[i], lr)));
  }
  return next;
}

}  // namespace audistill::ad
