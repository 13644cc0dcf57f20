#pragma once

#include <cstdint>
#include <vector>

#include "mcsagan/tensor.hpp"

namespace mcsagan {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> first_moment;
  std::vector<Tensor<Scalar>> second_moment;
};

/// Allocates zeroed moment buffers matching `params`.
template <typename Scalar>
AdamState<Scalar> make_adam_state(const std::vector<Tensor<Scalar>>& params,
                                  AdamConfig config);

/// One bias-corrected Adam update, in place on the parameter values.
/// An undefined gradient counts as zero.
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params,
               const std::vector<Tensor<Scalar>>& grads,
               AdamState<Scalar>& state);

/// Adam over a fixed parameter list, reading each parameter's `grad()`.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { state_.config.lr = lr; }
  double lr() const { return state_.config.lr; }

  AdamState<Scalar>& state() { return state_; }
  const AdamState<Scalar>& state() const { return state_; }
  const std::vector<Tensor<Scalar>>& params() const { return params_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamState<Scalar> state_;
};

/// Power-iteration estimate of the largest singular value of `weight`
/// reshaped to (out_channels x rest). `u` (length out_channels) is updated
/// in place and persists between calls.
template <typename Scalar>
Scalar estimate_spectral_norm(const Tensor<Scalar>& weight, Tensor<Scalar>& u,
                              int iterations);

/// weight / sigma_hat. Backward differentiates through the power iteration
/// (the starting vector is a constant), so gradients match finite differences.
/// Raises NumericError when sigma_hat < 1e-12.
template <typename Scalar>
Tensor<Scalar> spectral_normalize(const Tensor<Scalar>& weight,
                                  Tensor<Scalar>& u, int iterations);

}  // namespace mcsagan
