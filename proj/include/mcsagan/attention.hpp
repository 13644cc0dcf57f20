#pragma once

#include <map>
#include <random>
#include <string>

#include "mcsagan/layers.hpp"

namespace mcsagan {

struct AttentionBudget {
  Index t_q = 4096;
  Index t_kv = 4096;
  Index t_attn = Index{1} << 22;
  Index kappa = 8;
  double alpha = 0.2;
  double beta = 0.2;
  Index reduction = 8;

  /// Throws std::invalid_argument on caps < 1, kappa < 1 or alpha/beta
  /// outside (0, 1].
  void validate() const;
};

enum class AttentionMode { kSEOnly, kPooled };

const char* to_string(AttentionMode mode);

struct AttentionPlan {
  Index n_full = 0;
  AttentionMode mode = AttentionMode::kSEOnly;
  // Zero when the kappa test short-circuits before stride selection.
  Index s_q = 0;
  Index s_kv = 0;
  Dims3 q_dims{0, 0, 0};
  Dims3 kv_dims{0, 0, 0};
  Index n_q = 0;
  Index m_k = 0;
};

/// Pooled extent per axis: max(1, floor(dim / s)).
Dims3 pooled_dims(const Dims3& dims, Index s);

/// Smallest s >= 1 whose pooled token count is <= cap. Axes exhausted before
/// the cap is met are clamped to one token, so the search always terminates.
Index plan_stride(const Dims3& dims, Index cap);

AttentionPlan plan_attention(const Dims3& dims, const AttentionBudget& budget);

/// Memory-bounded hybrid attention:
///   y = x + alpha * x_NL + beta * x_SE     (pooled attention path)
///   y = x + beta * x_SE                    (fail-safe when over budget)
template <typename S>
class MBHABlock {
 public:
  MBHABlock() = default;
  MBHABlock(Index channels, const AttentionBudget& budget, std::mt19937_64& rng,
            int sn_iterations = 1);

  Tensor<S> forward(const Tensor<S>& x) const;
  const AttentionPlan& plan_for(const Dims3& dims) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Index channels() const { return channels_; }
  Index reduced() const { return reduced_; }
  const AttentionBudget& budget() const { return budget_; }

  SEGate<S>& se() { return se_; }
  Conv3dLayer<S>& theta() { return theta_; }
  Conv3dLayer<S>& phi() { return phi_; }
  Conv3dLayer<S>& g() { return g_; }
  Conv3dLayer<S>& out() { return out_; }

  /// Largest affinity tensor (elements) allocated by the last forward; zero
  /// when the fail-safe path ran.
  Index last_affinity_elements() const { return last_affinity_; }

 private:
  Index channels_ = 0, reduced_ = 0;
  AttentionBudget budget_;
  SEGate<S> se_;
  Conv3dLayer<S> theta_, phi_, g_, out_;
  mutable std::map<Dims3, AttentionPlan> plans_;
  mutable Index last_affinity_ = 0;
};

/// Unpooled non-local attention, y = x + alpha * W_O(softmax(QK^T/sqrt(C'))V).
/// Refuses volumes whose N x N affinity would exceed `max_affinity`.
template <typename S>
class SelfAttention3d {
 public:
  SelfAttention3d() = default;
  SelfAttention3d(Index channels, double alpha, Index max_affinity,
                  std::mt19937_64& rng, int sn_iterations = 1);

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix) const;

  Index reduced() const { return reduced_; }
  Conv3dLayer<S>& theta() { return theta_; }
  Conv3dLayer<S>& phi() { return phi_; }
  Conv3dLayer<S>& g() { return g_; }
  Conv3dLayer<S>& out() { return out_; }

 private:
  Index channels_ = 0, reduced_ = 0;
  double alpha_ = 0.2;
  Index max_affinity_ = 0;
  Conv3dLayer<S> theta_, phi_, g_, out_;
};

/// Dot-product attention for one sample. q [1,C',Dq,Hq,Wq], k and v
/// [1,C',Dk,Hk,Wk]; returns [1,C',Dq,Hq,Wq]. Writes the affinity size.
template <typename S>
Tensor<S> pooled_attention(const Tensor<S>& q, const Tensor<S>& k,
                           const Tensor<S>& v, Index* affinity_elements);

}  // namespace mcsagan
