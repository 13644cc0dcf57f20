#pragma once

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mcsagan/networks.hpp"
#include "mcsagan/tensor.hpp"

namespace mcsagan {

struct LossWeights {
  double rec = 29.8016;
  double msssim = 13.7866;
  double perc = 1.7760;
  double seg = 1.0421;
  double cls = 0.4613;
  double gp = 10.0;
  /// Extra weight on tumour voxels in the reconstruction term.
  double alpha_mask = 4.0;

  void validate() const;
};

struct LossTerm {
  std::string name;
  double value = 0;
  double weight = 1;
};

struct LossReport {
  std::vector<LossTerm> terms;
  double total = 0;

  double reconstructed_total() const;
  /// Value of a named term; throws std::out_of_range when absent.
  double value(const std::string& name) const;
};

// ------------------------------------------------------------------ critic

/// mean(score_fake) - mean(score_real), both [B].
template <typename S>
Tensor<S> critic_wgan_loss(const Tensor<S>& score_fake, const Tensor<S>& score_real);

/// -mean(score_fake): the generator's adversarial term.
template <typename S>
Tensor<S> adversarial_loss(const Tensor<S>& score_fake);

/// (target, source) -> realism map with batch on axis 0.
template <typename S>
using Scorer = std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&)>;

/// mean_b (||grad_y sum(scorer(y_b, x_b))|| - 1)^2 at y = u y_real + (1-u) y_fake,
/// u drawn per sample. The result is differentiable with respect to whatever
/// parameters the scorer closes over.
template <typename S>
Tensor<S> gradient_penalty(const Scorer<S>& scorer, const Tensor<S>& y_real,
                           const Tensor<S>& y_fake, const Tensor<S>& source,
                           std::mt19937_64& rng);
/// Same with explicit interpolation coefficients (one per sample).
template <typename S>
Tensor<S> gradient_penalty(const Scorer<S>& scorer, const Tensor<S>& y_real,
                           const Tensor<S>& y_fake, const Tensor<S>& source,
                           const std::vector<S>& u);

/// Cross-entropy of logits [B,3] against one-hot codes [B,3], batch mean.
template <typename S>
Tensor<S> classification_loss(const Tensor<S>& logits, const Tensor<S>& codes);

template <typename S>
Tensor<S> critic_total(const Tensor<S>& wgan, const Tensor<S>& gp, const Tensor<S>& cls,
                       const LossWeights& w, LossReport* report = nullptr);

// --------------------------------------------------------------- generator

/// mean((1 + alpha*m) |y - y_hat|); m must be binary.
template <typename S>
Tensor<S> reconstruction_loss(const Tensor<S>& pred, const Tensor<S>& target,
                              const Tensor<S>& mask, double alpha_mask);

inline constexpr std::array<double, 4> kPerceptualStageWeights{1.0, 0.5, 0.25, 0.1};

/// sum_k lambda_k mean|phi_k(y) - phi_k(y_hat)|. The target path carries no
/// history; the extractor's weights are frozen.
template <typename S>
Tensor<S> perceptual_loss(const Tensor<S>& pred, const Tensor<S>& target,
                          const FeatureExtractor<S>& extractor,
                          const std::array<double, 4>& stage_weights = kPerceptualStageWeights);

struct SsimParams {
  Index window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 2.0;
};

inline constexpr std::array<double, 5> kMsssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Number of scales a volume supports: the largest M <= 5 with
/// min(D,H,W) / 2^(M-1) >= window. Throws ShapeError below one window.
Index msssim_scales(const Dims3& dims, const SsimParams& p = {});

/// Mean local SSIM per sample ([B,C,...] -> [B], channels averaged).
template <typename S>
Tensor<S> ssim_index(const Tensor<S>& a, const Tensor<S>& b, const SsimParams& p = {});

/// Multi-scale SSIM per sample in [-1,1]; see msssim_scales for the scale count.
template <typename S>
Tensor<S> msssim_index(const Tensor<S>& a, const Tensor<S>& b, const SsimParams& p = {});

/// 1 - batch mean of msssim_index, in [0,2].
template <typename S>
Tensor<S> msssim_loss(const Tensor<S>& pred, const Tensor<S>& target,
                      const SsimParams& p = {});

inline constexpr double kDiceEps = 1e-6;

/// mean(softplus(l) - m*l).
template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& mask);

/// 1 - (2 sum(p m) + eps) / (sum p + sum m + eps), pooled over the batch.
template <typename S>
Tensor<S> soft_dice_loss(const Tensor<S>& prob, const Tensor<S>& mask, double eps = kDiceEps);

/// 0.5 BCE + 0.5 soft Dice of given logits.
template <typename S>
Tensor<S> seg_consistency_from_logits(const Tensor<S>& logits, const Tensor<S>& mask);

/// seg_consistency_from_logits applied to the frozen segmenter's prediction on y_hat.
/// Throws AutogradError when the segmenter is not frozen or holds gradients.
template <typename S>
Tensor<S> seg_consistency_loss(const Tensor<S>& pred, const Tensor<S>& codes,
                               const Tensor<S>& mask, const Segmenter<S>& segmenter);

/// Dice + 0.5 BCE, used to pretrain the segmenter.
template <typename S>
Tensor<S> segmenter_pretrain_loss(const Tensor<S>& logits, const Tensor<S>& mask);

template <typename S>
struct GeneratorParts {
  std::optional<Tensor<S>> adv, cls, rec, seg, perc, msssim;
};

template <typename S>
struct GeneratorLoss {
  Tensor<S> total;
  LossReport report;
};

/// L_adv + sum lambda_i L_i over the five weighted terms. Every part must be
/// present (ablated terms are passed as zeros).
template <typename S>
GeneratorLoss<S> generator_total(const GeneratorParts<S>& parts, const LossWeights& w);

/// Throws std::invalid_argument unless every element is 0 or 1.
template <typename S>
void require_binary(const Tensor<S>& mask, const char* what);

}  // namespace mcsagan
