#include "mcsagan/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mcsagan/optim.hpp"

namespace mcsagan {

namespace {
thread_local bool g_freeze_power = false;

template <typename S>
bool all_zero(const Tensor<S>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](S v) { return v == S(0); });
}
}  // namespace

PowerIterationFreeze::PowerIterationFreeze() : previous_(g_freeze_power) {
  g_freeze_power = true;
}
PowerIterationFreeze::~PowerIterationFreeze() { g_freeze_power = previous_; }
bool PowerIterationFreeze::active() { return g_freeze_power; }

template <typename S>
std::vector<Tensor<S>> ParamRegistry<S>::param_tensors() const {
  std::vector<Tensor<S>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <typename S>
Index ParamRegistry<S>::param_count() const {
  Index n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// --------------------------------------------------------------------- conv

template <typename S>
Conv3dLayer<S>::Conv3dLayer(const ConvSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  if (spec.in_ch < 1 || spec.out_ch < 1 || spec.kernel < 1 || spec.stride < 1)
    throw ShapeError("Conv3dLayer: channels, kernel and stride must be >= 1");
  const Index k = spec.kernel;
  const double fan_in = static_cast<double>(spec.in_ch * k * k * k);
  const double std = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  weight_ = Tensor<S>::randn({spec.out_ch, spec.in_ch, k, k, k}, rng, static_cast<S>(std));
  weight_.set_requires_grad(true);
  if (spec.bias) {
    bias_ = Tensor<S>::zeros({spec.out_ch});
    bias_.set_requires_grad(true);
  }
  if (spec.spectral) {
    u_ = Tensor<S>::randn({spec.out_ch}, rng);
  }
}

template <typename S>
Tensor<S> Conv3dLayer<S>::effective_weight() const {
  if (!spec_.spectral || all_zero(weight_)) return weight_;
  if (PowerIterationFreeze::active()) {
    Tensor<S> u = u_.clone();
    return spectral_normalize(weight_, u, spec_.sn_iterations);
  }
  return spectral_normalize(weight_, u_, spec_.sn_iterations);
}

template <typename S>
Tensor<S> Conv3dLayer<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 5 || x.dim(1) != spec_.in_ch)
    throw ShapeError("Conv3dLayer expects " + std::to_string(spec_.in_ch) +
                     " input channels, got shape " + to_string(x.shape()));
  std::optional<Tensor<S>> b;
  if (spec_.bias) b = bias_;
  return conv3d(x, effective_weight(), b, spec_.stride, spec_.padding);
}

template <typename S>
void Conv3dLayer<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  reg.param(prefix + ".weight", weight_);
  if (spec_.bias) reg.param(prefix + ".bias", bias_);
  if (spec_.spectral) reg.buffer(prefix + ".u", u_);
}

// --------------------------------------------------------------------- norm

template <typename S>
NormLayer<S>::NormLayer(Index channels, NormMode mode, int groups)
    : mode_(mode), groups_(groups) {
  if (mode == NormMode::kGroup && (groups < 1 || channels % groups != 0))
    throw ShapeError("NormLayer: " + std::to_string(channels) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
  gamma_ = Tensor<S>::ones({channels});
  beta_ = Tensor<S>::zeros({channels});
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

template <typename S>
Tensor<S> NormLayer<S>::forward(const Tensor<S>& x) const {
  const Index c = gamma_.numel();
  if (x.ndim() != 5 || x.dim(1) != c)
    throw ShapeError("NormLayer expects " + std::to_string(c) + " channels, got " +
                     to_string(x.shape()));
  Tensor<S> y = normalize(x, mode_, groups_, static_cast<S>(kNormEps));
  return add(mul(y, reshape(gamma_, {1, c, 1, 1, 1})), reshape(beta_, {1, c, 1, 1, 1}));
}

template <typename S>
void NormLayer<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  reg.param(prefix + ".scale", gamma_);
  reg.param(prefix + ".shift", beta_);
}

// ----------------------------------------------------------------- residual

template <typename S>
ResidualBlock<S>::ResidualBlock(Index in_ch, Index out_ch, NormMode mode,
                                std::mt19937_64& rng)
    : in_ch_(in_ch), out_ch_(out_ch) {
  const int groups = static_cast<int>(out_ch < 8 ? out_ch : 8);
  conv1_ = Conv3dLayer<S>({in_ch, out_ch, 3, 1, 1, false}, rng);
  norm1_ = NormLayer<S>(out_ch, mode, groups);
  conv2_ = Conv3dLayer<S>({out_ch, out_ch, 3, 1, 1, false}, rng);
  norm2_ = NormLayer<S>(out_ch, mode, groups);
  if (in_ch != out_ch) proj_ = Conv3dLayer<S>({in_ch, out_ch, 1, 1, 0, false}, rng);
}

template <typename S>
Tensor<S> ResidualBlock<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 5 || x.dim(1) != in_ch_)
    throw ShapeError("ResidualBlock expects " + std::to_string(in_ch_) +
                     " channels, got " + to_string(x.shape()));
  Tensor<S> h = leaky_relu(norm1_.forward(conv1_.forward(x)), static_cast<S>(kLeakySlope));
  h = norm2_.forward(conv2_.forward(h));
  return add(proj_ ? proj_->forward(x) : x, h);
}

template <typename S>
void ResidualBlock<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  conv1_.collect(reg, prefix + ".conv1");
  norm1_.collect(reg, prefix + ".norm1");
  conv2_.collect(reg, prefix + ".conv2");
  norm2_.collect(reg, prefix + ".norm2");
  if (proj_) proj_->collect(reg, prefix + ".proj");
}

// ----------------------------------------------------------------------- SE

Index reduced_width(Index channels, Index reduction) {
  return std::max<Index>(channels / reduction, 8);
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  const Index b = x.dim(0), c = x.dim(1);
  if (x.numel() == 0) throw ShapeError("global_avg_pool of an empty tensor");
  return reshape(mean_axis(reshape(x, {b, c, x.numel() / (b * c)}), 2), {b, c, 1, 1, 1});
}

template <typename S>
SEGate<S>::SEGate(Index channels, Index hidden, std::mt19937_64& rng)
    : channels_(channels) {
  w1_ = Conv3dLayer<S>({channels, hidden, 1, 1, 0, true}, rng);
  w2_ = Conv3dLayer<S>({hidden, channels, 1, 1, 0, true}, rng);
}

template <typename S>
Tensor<S> SEGate<S>::gate(const Tensor<S>& x) const {
  return sigmoid(w2_.forward(relu(w1_.forward(global_avg_pool(x)))));
}

template <typename S>
Tensor<S> SEGate<S>::forward(const Tensor<S>& x) const {
  return mul(x, gate(x));
}

template <typename S>
void SEGate<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  w1_.collect(reg, prefix + ".w1");
  w2_.collect(reg, prefix + ".w2");
}

// ----------------------------------------------------------- attention gate

template <typename S>
Tensor<S> resize_linear(const Tensor<S>& x, const Dims3& dims) {
  Tensor<S> y = x;
  for (int a = 0; a < 3; ++a) y = resample_axis(y, a + 2, dims[static_cast<std::size_t>(a)]);
  return y;
}

template <typename S>
AttentionGate<S>::AttentionGate(Index skip_ch, Index gate_ch, std::mt19937_64& rng) {
  const Index inter = std::max<Index>(skip_ch / 2, 4);
  wx_ = Conv3dLayer<S>({skip_ch, inter, 1, 1, 0, true}, rng);
  wg_ = Conv3dLayer<S>({gate_ch, inter, 1, 1, 0, true}, rng);
  psi_ = Conv3dLayer<S>({inter, 1, 1, 1, 0, true}, rng);
}

template <typename S>
Tensor<S> AttentionGate<S>::attention_map(const Tensor<S>& skip,
                                          const Tensor<S>& gating) const {
  if (skip.ndim() != 5 || gating.ndim() != 5 || skip.dim(0) != gating.dim(0))
    throw ShapeError("AttentionGate: batch mismatch between skip " +
                     to_string(skip.shape()) + " and gating " + to_string(gating.shape()));
  Tensor<S> g = gating;
  if (spatial_dims(g) != spatial_dims(skip)) g = resize_linear(g, spatial_dims(skip));
  return sigmoid(psi_.forward(relu(add(wx_.forward(skip), wg_.forward(g)))));
}

template <typename S>
Tensor<S> AttentionGate<S>::forward(const Tensor<S>& skip, const Tensor<S>& gating) const {
  return mul(skip, attention_map(skip, gating));
}

template <typename S>
void AttentionGate<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  wx_.collect(reg, prefix + ".wx");
  wg_.collect(reg, prefix + ".wg");
  psi_.collect(reg, prefix + ".psi");
}

// -------------------------------------------------------------------- dense

template <typename S>
Dense<S>::Dense(Index in, Index out, bool spectral, std::mt19937_64& rng)
    : layer_({in, out, 1, 1, 0, true, spectral}, rng) {}

template <typename S>
Tensor<S> Dense<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 2) throw ShapeError("Dense expects [B, in], got " + to_string(x.shape()));
  const Index b = x.dim(0);
  Tensor<S> y = layer_.forward(reshape(x, {b, x.dim(1), 1, 1, 1}));
  return reshape(y, {b, layer_.spec().out_ch});
}

template <typename S>
void Dense<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  layer_.collect(reg, prefix);
}

#define MCSAGAN_INSTANTIATE(S)                                              \
  template struct ParamRegistry<S>;                                         \
  template class Conv3dLayer<S>;                                            \
  template class NormLayer<S>;                                              \
  template class ResidualBlock<S>;                                          \
  template class SEGate<S>;                                                 \
  template class AttentionGate<S>;                                          \
  template class Dense<S>;                                                  \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                     \
  template Tensor<S> resize_linear(const Tensor<S>&, const Dims3&);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
