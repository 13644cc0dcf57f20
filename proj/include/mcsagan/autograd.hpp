#pragma once

#include <vector>

#include "mcsagan/tensor.hpp"

namespace mcsagan {

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
/// `grad()` of every leaf that requires it. The recorded graph is released
/// afterwards unless `retain_graph` is set; a second call on a released graph
/// raises AutogradError.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss, bool retain_graph = false);

/// Gradients of a scalar `output` with respect to `inputs`, returned rather
/// than accumulated. With `create_graph` the returned gradients carry history
/// themselves, so a second backward pass can differentiate through them
/// (used by the gradient penalty).
template <typename Scalar>
std::vector<Tensor<Scalar>> grad(const Tensor<Scalar>& output,
                                 const std::vector<Tensor<Scalar>>& inputs,
                                 bool create_graph = false);

namespace detail {

/// Attach a node to `out` if any input participates in autodiff and grad
/// mode is on. Returns `out` for chaining.
template <typename Scalar>
Tensor<Scalar> record(Tensor<Scalar> out, const char* name,
                      std::vector<Tensor<Scalar>> inputs,
                      typename Node<Scalar>::BackwardFn fn);

}  // namespace detail
}  // namespace mcsagan
