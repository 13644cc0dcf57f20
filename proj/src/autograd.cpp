#include "mcsagan/autograd.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "mcsagan/ops.hpp"

namespace mcsagan {
namespace detail {

template <typename S>
Tensor<S> record(Tensor<S> out, const char* name, std::vector<Tensor<S>> inputs,
                 typename Node<S>::BackwardFn fn) {
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<S>& t) {
                                 return t.defined() && t.requires_grad();
                               });
  if (!any) return out;
  auto node = std::make_shared<Node<S>>();
  node->name = name;
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.set_grad_fn(std::move(node));
  return out;
}

}  // namespace detail

namespace {

template <typename S>
struct Sweep {
  // Reverse topological order (output first).
  std::vector<Tensor<S>> order;
  std::unordered_map<TensorImpl<S>*, Tensor<S>> grads;
};

template <typename S>
std::vector<Tensor<S>> topo_order(const Tensor<S>& output) {
  std::vector<Tensor<S>> post;
  std::unordered_set<TensorImpl<S>*> seen;
  // Iterative DFS: (tensor, next child index).
  std::vector<std::pair<Tensor<S>, std::size_t>> stack;
  stack.emplace_back(output, 0);
  seen.insert(output.impl());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    auto node = t.grad_fn();
    if (node && node->released)
      throw AutogradError(
          "backward through a released graph (" + node->name +
          "); re-run the forward pass");
    if (node && next < node->inputs.size()) {
      const Tensor<S>& child = node->inputs[next++];
      if (child.defined() && child.requires_grad() &&
          seen.insert(child.impl()).second)
        stack.emplace_back(child, 0);
      continue;
    }
    post.push_back(t);
    stack.pop_back();
  }
  std::reverse(post.begin(), post.end());
  return post;
}

template <typename S>
void accumulate(std::unordered_map<TensorImpl<S>*, Tensor<S>>& grads,
                const Tensor<S>& target, const Tensor<S>& g) {
  if (g.shape() != target.shape())
    throw ShapeError("backward produced gradient " + to_string(g.shape()) +
                     " for tensor " + to_string(target.shape()));
  auto it = grads.find(target.impl());
  if (it == grads.end()) {
    grads.emplace(target.impl(), g);
  } else {
    it->second = add(it->second, g);
  }
}

template <typename S>
Sweep<S> run_sweep(const Tensor<S>& output, bool create_graph,
                   bool retain_graph) {
  if (!output.defined()) throw AutogradError("backward on undefined tensor");
  if (output.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " +
                     to_string(output.shape()));
  if (!output.requires_grad())
    throw AutogradError(
        "backward on a tensor that is detached from every parameter");

  EnableGradGuard mode(create_graph);
  Sweep<S> sweep;
  sweep.order = topo_order(output);
  sweep.grads.emplace(output.impl(), Tensor<S>::ones(output.shape()));

  for (const Tensor<S>& t : sweep.order) {
    auto node = t.grad_fn();
    if (!node) continue;
    auto it = sweep.grads.find(t.impl());
    if (it == sweep.grads.end()) continue;
    const Tensor<S> upstream = it->second;
    std::vector<Tensor<S>> input_grads = node->backward(upstream);
    if (input_grads.size() != node->inputs.size())
      throw AutogradError("backward of " + node->name +
                          " returned the wrong number of gradients");
    for (std::size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor<S>& in = node->inputs[i];
      if (!in.defined() || !in.requires_grad() || !input_grads[i].defined())
        continue;
      check_finite(input_grads[i], node->name.c_str());
      accumulate(sweep.grads, in, input_grads[i]);
    }
  }

  if (!retain_graph) {
    for (const Tensor<S>& t : sweep.order) {
      if (auto node = t.grad_fn()) {
        node->released = true;
        node->backward = nullptr;
        node->inputs.clear();
      }
    }
  }
  return sweep;
}

}  // namespace

template <typename S>
void backward(const Tensor<S>& loss, bool retain_graph) {
  Sweep<S> sweep = run_sweep(loss, /*create_graph=*/false, retain_graph);
  NoGradGuard no_grad;
  for (Tensor<S> t : sweep.order) {
    if (!t.is_leaf()) continue;
    auto it = sweep.grads.find(t.impl());
    if (it == sweep.grads.end()) continue;
    if (t.frozen())
      throw AutogradError("gradient reached a frozen tensor");
    if (!t.impl()->requires_grad) continue;
    if (t.has_grad())
      t.set_grad(add(t.grad(), it->second));
    else
      t.set_grad(it->second.detach());
  }
}

template <typename S>
std::vector<Tensor<S>> grad(const Tensor<S>& output,
                            const std::vector<Tensor<S>>& inputs,
                            bool create_graph) {
  Sweep<S> sweep = run_sweep(output, create_graph, /*retain_graph=*/true);
  std::vector<Tensor<S>> result;
  result.reserve(inputs.size());
  for (const Tensor<S>& in : inputs) {
    auto it = sweep.grads.find(in.impl());
    if (it == sweep.grads.end())
      result.push_back(Tensor<S>::zeros(in.shape()));
    else
      result.push_back(create_graph ? it->second : it->second.detach());
  }
  return result;
}

template void backward(const Tensor<float>&, bool);
template void backward(const Tensor<double>&, bool);
template std::vector<Tensor<float>> grad(const Tensor<float>&,
                                         const std::vector<Tensor<float>>&,
                                         bool);
template std::vector<Tensor<double>> grad(const Tensor<double>&,
                                          const std::vector<Tensor<double>>&,
                                          bool);
namespace detail {
template Tensor<float> record(Tensor<float>, const char*,
                              std::vector<Tensor<float>>,
                              Node<float>::BackwardFn);
template Tensor<double> record(Tensor<double>, const char*,
                               std::vector<Tensor<double>>,
                               Node<double>::BackwardFn);
}  // namespace detail

}  // namespace mcsagan
