#pragma once

#include <Eigen/Dense>
#include <limits>

#include "mcsagan/losses.hpp"
#include "mcsagan/tensor.hpp"

namespace mcsagan {

/// Returned by psnr when the volumes are identical.
inline constexpr double kPsnrInfinite = std::numeric_limits<double>::infinity();

template <typename S>
double mse(const Tensor<S>& pred, const Tensor<S>& target);

/// 10 log10(range^2 / MSE).
template <typename S>
double psnr(const Tensor<S>& pred, const Tensor<S>& target, double data_range = 2.0);

/// Batch mean of the Gaussian-windowed SSIM.
template <typename S>
double ssim(const Tensor<S>& pred, const Tensor<S>& target, const SsimParams& p = {});

template <typename S>
double msssim(const Tensor<S>& pred, const Tensor<S>& target, const SsimParams& p = {});

/// 2|A n B| / (|A| + |B|); both empty -> 1. Inputs must be binary.
template <typename S>
double dice(const Tensor<S>& pred_mask, const Tensor<S>& gt_mask);

/// Threshold probabilities (or sigmoid(logits) when `logits`) at 0.5.
template <typename S>
Tensor<S> binarize(const Tensor<S>& values, bool logits);

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (n-1)
  Index n = 0;

  /// Rows are samples.
  static FeatureStats from_samples(const Eigen::MatrixXd& features);
};

/// Frechet distance between two Gaussian fits of pooled features.
/// Throws NumericError on NaN or materially negative eigenvalues and
/// std::invalid_argument on non-symmetric covariances or mismatched dims.
double mfd(const FeatureStats& a, const FeatureStats& b);

}  // namespace mcsagan
