#pragma once

#include <array>
#include <optional>
#include <vector>

#include "mcsagan/tensor.hpp"

// Differentiable primitives. Every op records itself on the tape when grad
// mode is on, and every backward rule is written in terms of these same ops,
// so gradients are themselves differentiable (double backward).

namespace mcsagan {

using Dims3 = std::array<Index, 3>;

// ---------------------------------------------------------------- elementwise
// Binary ops broadcast numpy-style.

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S value);
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, S value);
template <typename S> Tensor<S> neg(const Tensor<S>& a);

template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> pow(const Tensor<S>& a, S exponent);
template <typename S> Tensor<S> sqrt(const Tensor<S>& a);
template <typename S> Tensor<S> square(const Tensor<S>& a);
template <typename S> Tensor<S> abs(const Tensor<S>& a);
template <typename S> Tensor<S> relu(const Tensor<S>& a);
template <typename S> Tensor<S> leaky_relu(const Tensor<S>& a, S slope);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& a);
template <typename S> Tensor<S> tanh(const Tensor<S>& a);
/// log(1 + exp(x)), computed stably.
template <typename S> Tensor<S> softplus(const Tensor<S>& a);

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S s) { return mul_scalar(a, s); }
template <typename S>
Tensor<S> operator*(S s, const Tensor<S>& a) { return mul_scalar(a, s); }
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, S s) { return add_scalar(a, s); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, S s) { return add_scalar(a, -s); }

// ----------------------------------------------------------------- reductions

template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);
/// Reduce by summation down to `shape` (the inverse of broadcasting).
template <typename S> Tensor<S> sum_to(const Tensor<S>& a, const Shape& shape);
template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape);
/// Sum over one axis, keeping it with extent 1.
template <typename S> Tensor<S> sum_axis(const Tensor<S>& a, int axis);
template <typename S> Tensor<S> mean_axis(const Tensor<S>& a, int axis);

// ---------------------------------------------------------------------- shape

template <typename S> Tensor<S> reshape(const Tensor<S>& a, Shape shape);
/// Swap the last two axes of a rank-3 tensor.
template <typename S> Tensor<S> transpose_last2(const Tensor<S>& a);
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, Index start, Index length);
/// Zero tensor of `shape` with `a` written at [start, start+len) on `axis`.
template <typename S>
Tensor<S> embed(const Tensor<S>& a, const Shape& shape, int axis, Index start);

// ---------------------------------------------------------------- activations

template <typename S> Tensor<S> softmax(const Tensor<S>& a, int axis);
/// log(sum(exp(a))) along `axis`, kept with extent 1.
template <typename S> Tensor<S> logsumexp(const Tensor<S>& a, int axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& a, int axis);

// --------------------------------------------------------------- linear maps

/// [B,n,k] x [B,k,m] -> [B,n,m]
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

/// Direct 3-D cross-correlation. input [B,Ci,D,H,W], weight [Co,Ci,k,k,k].
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight,
                 const std::optional<Tensor<S>>& bias, Index stride,
                 Index padding);
/// Adjoint of conv3d with respect to its input (transposed convolution).
template <typename S>
Tensor<S> conv3d_grad_input(const Tensor<S>& grad_out, const Tensor<S>& weight,
                            const Shape& input_shape, Index stride,
                            Index padding);
/// Adjoint of conv3d with respect to its weight.
template <typename S>
Tensor<S> conv3d_grad_weight(const Tensor<S>& input, const Tensor<S>& grad_out,
                             const Shape& weight_shape, Index stride,
                             Index padding);
Dims3 conv_output_dims(const Dims3& in, Index kernel, Index stride,
                       Index padding);

/// Non-overlapping block mean, floor semantics (remainder dropped).
template <typename S> Tensor<S> avg_pool3d(const Tensor<S>& a, Index s);
/// Anisotropic variant; one block size per spatial axis.
template <typename S>
Tensor<S> avg_pool3d(const Tensor<S>& a, const Dims3& block);
template <typename S>
Tensor<S> avg_pool3d_adjoint(const Tensor<S>& g, const Shape& input_shape,
                             const Dims3& block);

/// Trilinear resize to `target`, align-corners-false convention.
template <typename S>
Tensor<S> upsample_trilinear(const Tensor<S>& a, const Dims3& target);
/// Linear interpolation along one spatial axis (2, 3 or 4) to `length`.
template <typename S>
Tensor<S> resample_axis(const Tensor<S>& a, int axis, Index length);
template <typename S>
Tensor<S> resample_axis_adjoint(const Tensor<S>& g, int axis,
                                Index input_length);

// ------------------------------------------------------------- normalization

enum class NormMode { kInstance, kGroup };

/// Zero-mean / unit-variance over each (sample, channel) or (sample, group)
/// slab; no affine part.
template <typename S>
Tensor<S> normalize(const Tensor<S>& x, NormMode mode, int groups, S eps);

// ----------------------------------------------------------------- utilities

template <typename S> Dims3 spatial_dims(const Tensor<S>& x);

}  // namespace mcsagan
