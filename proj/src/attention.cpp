#include "mcsagan/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcsagan {

void AttentionBudget::validate() const {
  if (t_q < 1 || t_kv < 1 || t_attn < 1)
    throw std::invalid_argument("attention budget caps must be >= 1");
  if (kappa < 1) throw std::invalid_argument("attention budget kappa must be >= 1");
  if (!(alpha > 0 && alpha <= 1) || !(beta > 0 && beta <= 1))
    throw std::invalid_argument("attention residual scales must lie in (0, 1]");
  if (reduction < 1) throw std::invalid_argument("SE reduction must be >= 1");
}

const char* to_string(AttentionMode mode) {
  return mode == AttentionMode::kPooled ? "POOLED_ATTENTION" : "SE_ONLY";
}

namespace {

void require_dims(const Dims3& dims) {
  for (Index d : dims)
    if (d < 1) throw std::invalid_argument("attention dims must be >= 1");
}

Index tokens(const Dims3& d) { return d[0] * d[1] * d[2]; }

Dims3 pool_block(const Dims3& dims, Index s) {
  return {std::min(s, dims[0]), std::min(s, dims[1]), std::min(s, dims[2])};
}

}  // namespace

Dims3 pooled_dims(const Dims3& dims, Index s) {
  if (s < 1) throw std::invalid_argument("stride must be >= 1");
  return {std::max<Index>(1, dims[0] / s), std::max<Index>(1, dims[1] / s),
          std::max<Index>(1, dims[2] / s)};
}

Index plan_stride(const Dims3& dims, Index cap) {
  require_dims(dims);
  if (cap < 1) throw std::invalid_argument("token cap must be >= 1");
  // Token count is non-increasing in s and reaches 1 at s = max(dims).
  Index lo = 1, hi = std::max({dims[0], dims[1], dims[2]});
  while (lo < hi) {
    const Index mid = lo + (hi - lo) / 2;
    if (tokens(pooled_dims(dims, mid)) <= cap)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

AttentionPlan plan_attention(const Dims3& dims, const AttentionBudget& budget) {
  require_dims(dims);
  budget.validate();
  AttentionPlan plan;
  plan.n_full = tokens(dims);
  if (plan.n_full > budget.kappa * budget.t_q) return plan;
  plan.s_q = plan_stride(dims, budget.t_q);
  plan.s_kv = plan_stride(dims, budget.t_kv);
  plan.q_dims = pooled_dims(dims, plan.s_q);
  plan.kv_dims = pooled_dims(dims, plan.s_kv);
  plan.n_q = tokens(plan.q_dims);
  plan.m_k = tokens(plan.kv_dims);
  plan.mode = plan.n_q * plan.m_k > budget.t_attn ? AttentionMode::kSEOnly
                                                   : AttentionMode::kPooled;
  return plan;
}

// ------------------------------------------------------------ shared kernel

template <typename S>
Tensor<S> pooled_attention(const Tensor<S>& q, const Tensor<S>& k,
                           const Tensor<S>& v, Index* affinity_elements) {
  const Index c = q.dim(1);
  const Dims3 qd = spatial_dims(q);
  const Index n = q.numel() / c;
  const Index m = k.numel() / c;
  Tensor<S> qt = transpose_last2(reshape(q, {1, c, n}));  // [1,N,C']
  Tensor<S> kt = reshape(k, {1, c, m});                     // [1,C',M]
  Tensor<S> vt = transpose_last2(reshape(v, {1, c, m}));  // [1,M,C']
  const S scale = S(1) / std::sqrt(static_cast<S>(c));
  Tensor<S> affinity = softmax(mul_scalar(matmul(qt, kt), scale), 2);
  check_finite(affinity, "attention affinity");
  if (affinity_elements) *affinity_elements = affinity.numel();
  Tensor<S> y = transpose_last2(matmul(affinity, vt));  // [1,C',N]
  return reshape(y, {1, c, qd[0], qd[1], qd[2]});
}

// -------------------------------------------------------------------- MBHA

template <typename S>
MBHABlock<S>::MBHABlock(Index channels, const AttentionBudget& budget,
                        std::mt19937_64& rng, int sn_iterations)
    : channels_(channels), reduced_(reduced_width(channels, budget.reduction)),
      budget_(budget) {
  budget.validate();
  se_ = SEGate<S>(channels, reduced_, rng);
  const ConvSpec in{channels, reduced_, 1, 1, 0, true, true, sn_iterations};
  theta_ = Conv3dLayer<S>(in, rng);
  phi_ = Conv3dLayer<S>(in, rng);
  g_ = Conv3dLayer<S>(in, rng);
  out_ = Conv3dLayer<S>({reduced_, channels, 1, 1, 0, true, true, sn_iterations}, rng);
}

template <typename S>
const AttentionPlan& MBHABlock<S>::plan_for(const Dims3& dims) const {
  auto it = plans_.find(dims);
  if (it == plans_.end()) it = plans_.emplace(dims, plan_attention(dims, budget_)).first;
  return it->second;
}

template <typename S>
Tensor<S> MBHABlock<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 5 || x.dim(1) != channels_)
    throw ShapeError("MBHA block expects " + std::to_string(channels_) +
                     " channels, got " + to_string(x.shape()));
  const Dims3 dims = spatial_dims(x);
  const AttentionPlan& plan = plan_for(dims);
  const S beta = static_cast<S>(budget_.beta);
  Tensor<S> x_se = se_.forward(x);
  last_affinity_ = 0;
  if (plan.mode == AttentionMode::kSEOnly) return add(x, mul_scalar(x_se, beta));

  Tensor<S> x_q = avg_pool3d(x, pool_block(dims, plan.s_q));
  Tensor<S> x_kv = avg_pool3d(x, pool_block(dims, plan.s_kv));
  Tensor<S> q = theta_.forward(x_q);
  Tensor<S> k = phi_.forward(x_kv);
  Tensor<S> v = g_.forward(x_kv);
  // One sample at a time so that no affinity allocation exceeds N_q * M_k.
  std::vector<Tensor<S>> per_sample;
  const Index batch = x.dim(0);
  for (Index b = 0; b < batch; ++b) {
    Index elements = 0;
    per_sample.push_back(pooled_attention(slice(q, 0, b, 1), slice(k, 0, b, 1),
                                          slice(v, 0, b, 1), &elements));
    last_affinity_ = std::max(last_affinity_, elements);
  }
  Tensor<S> y = batch == 1 ? per_sample[0] : concat(per_sample, 0);
  if (plan.s_q > 1) y = upsample_trilinear(y, dims);
  Tensor<S> x_nl = out_.forward(y);
  return add(add(x, mul_scalar(x_nl, static_cast<S>(budget_.alpha))), mul_scalar(x_se, beta));
}

template <typename S>
void MBHABlock<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  se_.collect(reg, prefix + ".se");
  theta_.collect(reg, prefix + ".theta");
  phi_.collect(reg, prefix + ".phi");
  g_.collect(reg, prefix + ".g");
  out_.collect(reg, prefix + ".out");
}

// ------------------------------------------------------ full self-attention

template <typename S>
SelfAttention3d<S>::SelfAttention3d(Index channels, double alpha, Index max_affinity,
                                    std::mt19937_64& rng, int sn_iterations)
    : channels_(channels), reduced_(reduced_width(channels)), alpha_(alpha),
      max_affinity_(max_affinity) {
  const ConvSpec in{channels, reduced_, 1, 1, 0, true, true, sn_iterations};
  theta_ = Conv3dLayer<S>(in, rng);
  phi_ = Conv3dLayer<S>(in, rng);
  g_ = Conv3dLayer<S>(in, rng);
  out_ = Conv3dLayer<S>({reduced_, channels, 1, 1, 0, true, true, sn_iterations}, rng);
}

template <typename S>
Tensor<S> SelfAttention3d<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 5 || x.dim(1) != channels_)
    throw ShapeError("self-attention expects " + std::to_string(channels_) +
                     " channels, got " + to_string(x.shape()));
  const Dims3 dims = spatial_dims(x);
  const Index n = tokens(dims);
  if (n * n > max_affinity_)
    throw std::invalid_argument("full self-attention over " + std::to_string(n) +
                                " voxels needs " + std::to_string(n * n) +
                                " affinity elements, above the cap of " +
                                std::to_string(max_affinity_));
  Tensor<S> q = theta_.forward(x), k = phi_.forward(x), v = g_.forward(x);
  std::vector<Tensor<S>> per_sample;
  for (Index b = 0; b < x.dim(0); ++b)
    per_sample.push_back(pooled_attention(slice(q, 0, b, 1), slice(k, 0, b, 1),
                                          slice(v, 0, b, 1), nullptr));
  Tensor<S> y = per_sample.size() == 1 ? per_sample[0] : concat(per_sample, 0);
  return add(x, mul_scalar(out_.forward(y), static_cast<S>(alpha_)));
}

template <typename S>
void SelfAttention3d<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  theta_.collect(reg, prefix + ".theta");
  phi_.collect(reg, prefix + ".phi");
  g_.collect(reg, prefix + ".g");
  out_.collect(reg, prefix + ".out");
}

#define MCSAGAN_INSTANTIATE(S)                                                  \
  template class MBHABlock<S>;                                                  \
  template class SelfAttention3d<S>;                                            \
  template Tensor<S> pooled_attention(const Tensor<S>&, const Tensor<S>&,       \
                                      const Tensor<S>&, Index*);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
