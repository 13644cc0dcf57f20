#include "mcsagan/optim.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "mcsagan/ops.hpp"

namespace mcsagan {

template <typename S>
AdamState<S> make_adam_state(const std::vector<Tensor<S>>& params,
                             AdamConfig config) {
  AdamState<S> state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.push_back(Tensor<S>::zeros(p.shape()));
    state.second_moment.push_back(Tensor<S>::zeros(p.shape()));
  }
  return state;
}

template <typename S>
void adam_step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads,
               AdamState<S>& state) {
  if (params.size() != grads.size() ||
      params.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  const AdamConfig& c = state.config;
  if (!(c.lr > 0)) throw std::invalid_argument("adam_step: lr must be > 0");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) continue;
    if (grads[i].shape() != params[i].shape())
      throw ShapeError("adam_step: gradient shape " + to_string(grads[i].shape()) +
                       " for parameter " + to_string(params[i].shape()));
    for (S g : grads[i].data())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].defined()) continue;
    S* p = params[i].raw();
    const S* g = grads[i].raw();
    S* m = state.first_moment[i].raw();
    S* v = state.second_moment[i].raw();
    const Index n = params[i].numel();
    for (Index k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (S(1) - b1) * g[k];
      v[k] = b2 * v[k] + (S(1) - b2) * g[k] * g[k];
      const double m_hat = static_cast<double>(m[k]) / bc1;
      const double v_hat = static_cast<double>(v[k]) / bc2;
      p[k] -= static_cast<S>(c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

template <typename S>
Adam<S>::Adam(std::vector<Tensor<S>> params, AdamConfig config)
    : params_(std::move(params)), state_(make_adam_state(params_, config)) {}

template <typename S>
void Adam<S>::step() {
  std::vector<Tensor<S>> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(p.grad());
  adam_step(params_, grads, state_);
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename S>
S estimate_spectral_norm(const Tensor<S>& weight, Tensor<S>& u, int iterations) {
  if (iterations < 1)
    throw std::invalid_argument("spectral norm needs at least one iteration");
  using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  const Index rows = weight.dim(0);
  const Index cols = weight.numel() / rows;
  if (u.numel() != rows)
    throw ShapeError("spectral norm state has " + std::to_string(u.numel()) +
                     " entries for " + std::to_string(rows) + " rows");
  Eigen::Map<const RowMat> w(weight.raw(), rows, cols);
  Eigen::Map<Vec> uvec(u.raw(), rows);
  constexpr S kTiny = S(1e-12);
  if (uvec.norm() < kTiny) uvec.setOnes();
  uvec.normalize();
  Vec v(cols);
  for (int it = 0; it < iterations; ++it) {
    v.noalias() = w.transpose() * uvec;
    const S vn = v.norm();
    if (vn < kTiny) throw NumericError("spectral norm of a zero weight matrix");
    v /= vn;
    Vec wu = w * v;
    const S un = wu.norm();
    if (un < kTiny) throw NumericError("spectral norm of a zero weight matrix");
    uvec = wu / un;
  }
  const S sigma = uvec.dot(w * v);
  if (!(sigma >= kTiny)) throw NumericError("spectral norm estimate below 1e-12");
  return sigma;
}

template <typename S>
Tensor<S> spectral_normalize(const Tensor<S>& weight, Tensor<S>& u,
                             int iterations) {
  const Index rows = weight.dim(0);
  const Index cols = weight.numel() / rows;
  // Starting vector, as estimate_spectral_norm will normalize it.
  Tensor<S> u0 = u.clone();
  const S sigma = estimate_spectral_norm(weight, u, iterations);
  if (!grad_enabled() || !weight.requires_grad())
    return mul_scalar(weight, S(1) / sigma);

  // Replay the iteration with differentiable ops so that the gradient is the
  // one of the function actually evaluated (u0 is a constant).
  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> u0v(u0.raw(), rows);
  if (u0v.norm() < S(1e-12)) u0v.setOnes();
  u0v.normalize();
  const Tensor<S> w = reshape(weight, {1, rows, cols});
  const Tensor<S> wt = transpose_last2(w);
  auto unit = [](const Tensor<S>& x) { return div(x, broadcast_to(sqrt(sum(square(x))), x.shape())); };
  Tensor<S> uv = reshape(u0, {1, rows, 1}), vv;
  for (int it = 0; it < iterations; ++it) {
    vv = unit(matmul(wt, uv));
    uv = unit(matmul(w, vv));
  }
  const Tensor<S> s = sum(mul(uv, matmul(w, vv)));
  return div(weight, broadcast_to(s, weight.shape()));
}

#define MCSAGAN_INSTANTIATE(S)                                                \
  template AdamState<S> make_adam_state(const std::vector<Tensor<S>>&,        \
                                        AdamConfig);                          \
  template void adam_step(std::vector<Tensor<S>>&,                            \
                          const std::vector<Tensor<S>>&, AdamState<S>&);      \
  template class Adam<S>;                                                     \
  template S estimate_spectral_norm(const Tensor<S>&, Tensor<S>&, int);       \
  template Tensor<S> spectral_normalize(const Tensor<S>&, Tensor<S>&, int);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
