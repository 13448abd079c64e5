#pragma once

#include <atomic>
#include <span>
#include <unordered_map>
#include <vector>

#include "pargan/tensor/ops.hpp"

namespace pargan {

namespace detail {

inline std::atomic<std::size_t>& detached_backward_counter() {
  static std::atomic<std::size_t> count{0};
  return count;
}

template <typename T>
struct BackwardResult {
  std::unordered_map<std::uint64_t, Tensor<T>> grads;
  std::unordered_map<std::uint64_t, Tensor<T>> leaves;
};

// Reverse sweep over the entries that existed when the sweep started. When
// `create_graph` is set the gradient computations are themselves recorded
// (appended past the sweep's start), otherwise recording is suspended.
template <typename T>
BackwardResult<T> reverse_sweep(Tape<T>& tape, const Tensor<T>& root, bool create_graph,
                                bool keep_all) {
  BackwardResult<T> res;
  res.grads.emplace(root.id(), Tensor<T>::ones(root.shape()));
  if (root.is_leaf()) res.leaves.emplace(root.id(), root);

  auto accumulate = [&](const Tensor<T>& input, const Tensor<T>& g) {
    if (g.shape() != input.shape()) {
      throw DimensionError("backward produced gradient " + shape_str(g.shape()) + " for input " +
                           shape_str(input.shape()));
    }
    auto it = res.grads.find(input.id());
    if (it == res.grads.end()) {
      res.grads.emplace(input.id(), g);
    } else if (create_graph) {
      it->second = add(it->second, g);
    } else {
      NoGradGuard<T> off;
      it->second = add(it->second, g);
    }
    if (input.is_leaf()) res.leaves.emplace(input.id(), input);
  };

  const std::size_t n = tape.size();
  for (std::size_t i = n; i-- > 0;) {
    const auto& e = tape.entry(i);
    auto it = res.grads.find(e.output.id());
    if (it == res.grads.end()) continue;
    const Tensor<T> g = it->second;
    if (!keep_all) res.grads.erase(it);

    std::vector<bool> need(e.inputs.size());
    bool any = false;
    for (std::size_t k = 0; k < e.inputs.size(); ++k) {
      need[k] = e.inputs[k].requires_grad();
      any = any || need[k];
    }
    if (!any) continue;

    typename Tape<T>::Grads in_grads;
    if (create_graph) {
      in_grads = e.backward(g, need);
    } else {
      NoGradGuard<T> off;
      in_grads = e.backward(g, need);
    }
    for (std::size_t k = 0; k < e.inputs.size(); ++k) {
      if (need[k] && k < in_grads.size() && in_grads[k]) accumulate(e.inputs[k], *in_grads[k]);
    }
  }
  return res;
}

}  // namespace detail

/// Number of backward() calls made on tensors that carry no gradient history.
inline std::size_t detached_backward_warnings() { return detail::detached_backward_counter().load(); }

/// Accumulates dLoss/dLeaf into the `grad` of every leaf that requires it.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.is_scalar()) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    ++detail::detached_backward_counter();
    return;
  }
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw ContractError("backward: no live tape on this thread");
  auto res = detail::reverse_sweep(*tape, loss, false, false);
  for (auto& [id, leaf] : res.leaves) {
    auto it = res.grads.find(id);
    if (it != res.grads.end()) {
      Tensor<T> copy = leaf;
      copy.accumulate_grad(it->second);
    }
  }
}

/// Gradients of a scalar `output` with respect to `inputs`, returned rather
/// than accumulated. With `create_graph` the result stays on the tape and can
/// appear in a further differentiable expression (double backward).
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, std::span<const Tensor<T>> inputs,
                            bool create_graph = true) {
  if (!output.is_scalar()) {
    throw ContractError("grad: output must be a scalar, got shape " + shape_str(output.shape()));
  }
  for (const auto& in : inputs) {
    if (!in.requires_grad()) {
      throw ContractError("grad: input of shape " + shape_str(in.shape()) +
                          " is not on the tape (requires_grad is false)");
    }
  }
  std::vector<Tensor<T>> out;
  out.reserve(inputs.size());
  auto* tape = Tape<T>::active();
  if (tape == nullptr || !output.requires_grad()) {
    for (const auto& in : inputs) out.push_back(Tensor<T>::zeros(in.shape()));
    return out;
  }
  auto res = detail::reverse_sweep(*tape, output, create_graph, true);
  for (const auto& in : inputs) {
    auto it = res.grads.find(in.id());
    out.push_back(it == res.grads.end() ? Tensor<T>::zeros(in.shape()) : it->second);
  }
  return out;
}

/// d critic_output / d input as a differentiable tensor.
template <typename T>
Tensor<T> grad_of_output_wrt_input(const Tensor<T>& critic_output, const Tensor<T>& input) {
  const Tensor<T> in[] = {input};
  return grad<T>(critic_output, in, true).front();
}

}  // namespace pargan
