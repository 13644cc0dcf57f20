#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mcsagan/ops.hpp"
#include "mcsagan/tensor.hpp"

namespace mcsagan {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kNormEps = 1e-5;

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

/// Flat, ordered view of a model's state. Tensors are shared handles, so the
/// registry aliases the live weights.
template <typename S>
struct ParamRegistry {
  std::vector<NamedTensor<S>> params;
  std::vector<NamedTensor<S>> buffers;

  void param(const std::string& name, const Tensor<S>& t) { params.push_back({name, t}); }
  void buffer(const std::string& name, const Tensor<S>& t) { buffers.push_back({name, t}); }
  std::vector<Tensor<S>> param_tensors() const;
  Index param_count() const;
};

/// While alive, spectral-norm layers estimate sigma from a copy of their
/// power-iteration state instead of advancing it (evaluation, gradient checks).
class PowerIterationFreeze {
 public:
  PowerIterationFreeze();
  ~PowerIterationFreeze();
  PowerIterationFreeze(const PowerIterationFreeze&) = delete;
  PowerIterationFreeze& operator=(const PowerIterationFreeze&) = delete;
  static bool active();

 private:
  bool previous_;
};

struct ConvSpec {
  Index in_ch = 1;
  Index out_ch = 1;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  bool bias = true;
  bool spectral = false;
  int sn_iterations = 1;
};

template <typename S>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(const ConvSpec& spec, std::mt19937_64& rng);

  Tensor<S> forward(const Tensor<S>& x) const;
  /// The weight actually applied (spectrally normalized when enabled).
  Tensor<S> effective_weight() const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  const ConvSpec& spec() const { return spec_; }
  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }
  const Tensor<S>& weight() const { return weight_; }
  const Tensor<S>& bias() const { return bias_; }
  Tensor<S>& power_state() { return u_; }

 private:
  ConvSpec spec_;
  Tensor<S> weight_, bias_;
  mutable Tensor<S> u_;
};

/// Instance or group normalization followed by a per-channel affine map.
template <typename S>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(Index channels, NormMode mode, int groups = 8);

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Tensor<S>& scale() { return gamma_; }
  Tensor<S>& shift() { return beta_; }

 private:
  NormMode mode_ = NormMode::kInstance;
  int groups_ = 1;
  Tensor<S> gamma_, beta_;
};

/// y = proj(x) + norm(conv(lrelu(norm(conv(x))))); proj is 1x1x1 when the
/// channel count changes, identity otherwise.
template <typename S>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(Index in_ch, Index out_ch, NormMode mode, std::mt19937_64& rng);

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Conv3dLayer<S>& conv1() { return conv1_; }
  Conv3dLayer<S>& conv2() { return conv2_; }
  bool has_projection() const { return proj_.has_value(); }

 private:
  Index in_ch_ = 0, out_ch_ = 0;
  Conv3dLayer<S> conv1_, conv2_;
  NormLayer<S> norm1_, norm2_;
  std::optional<Conv3dLayer<S>> proj_;
};

/// Width of the squeezed channel descriptor: max(C / r, 8).
Index reduced_width(Index channels, Index reduction = 8);

/// Squeeze-and-excitation: s(x) = sigmoid(W2 relu(W1 GAP(x))).
template <typename S>
class SEGate {
 public:
  SEGate() = default;
  SEGate(Index channels, Index hidden, std::mt19937_64& rng);

  /// Channel gate, shape [B,C,1,1,1], values in (0,1).
  Tensor<S> gate(const Tensor<S>& x) const;
  /// x * s(x)
  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Conv3dLayer<S>& w1() { return w1_; }
  Conv3dLayer<S>& w2() { return w2_; }

 private:
  Index channels_ = 0;
  Conv3dLayer<S> w1_, w2_;
};

/// Additive attention gate over encoder skip features, driven by a decoder
/// gating signal.
template <typename S>
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(Index skip_ch, Index gate_ch, std::mt19937_64& rng);

  /// Single-channel map in (0,1) at the skip's resolution.
  Tensor<S> attention_map(const Tensor<S>& skip, const Tensor<S>& gating) const;
  Tensor<S> forward(const Tensor<S>& skip, const Tensor<S>& gating) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Conv3dLayer<S>& theta_x() { return wx_; }
  Conv3dLayer<S>& phi_g() { return wg_; }
  Conv3dLayer<S>& psi() { return psi_; }

 private:
  Conv3dLayer<S> wx_, wg_, psi_;
};

/// Fully connected layer on [B, in] inputs.
template <typename S>
class Dense {
 public:
  Dense() = default;
  Dense(Index in, Index out, bool spectral, std::mt19937_64& rng);

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;
  Conv3dLayer<S>& layer() { return layer_; }

 private:
  Conv3dLayer<S> layer_;
};

/// Global average pool: [B,C,D,H,W] -> [B,C,1,1,1].
template <typename S> Tensor<S> global_avg_pool(const Tensor<S>& x);

/// Resample a [B,C,D,H,W] tensor to new spatial dims with linear
/// interpolation along each axis (either direction).
template <typename S> Tensor<S> resize_linear(const Tensor<S>& x, const Dims3& dims);

}  // namespace mcsagan
