#include "mcsagan/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "mcsagan/ops.hpp"

namespace mcsagan {

namespace {

template <typename S>
void require_same(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
}

// Symmetric positive semi-definite square root; tiny negative eigenvalues
// from round-off are clamped.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8)
      throw NumericError("covariance product has a negative eigenvalue " +
                         std::to_string(ev(i)));
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void require_symmetric(const Eigen::MatrixXd& c) {
  const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw std::invalid_argument("covariance matrix is not symmetric");
}

}  // namespace

template <typename S>
double mse(const Tensor<S>& pred, const Tensor<S>& target) {
  require_same(pred, target, "mse");
  double acc = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred.raw()[i]) - static_cast<double>(target.raw()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.numel());
}

template <typename S>
double psnr(const Tensor<S>& pred, const Tensor<S>& target, double data_range) {
  if (!(data_range > 0)) throw std::invalid_argument("psnr data range must be positive");
  const double e = mse(pred, target);
  if (e == 0) return kPsnrInfinite;
  return 10.0 * std::log10(data_range * data_range / e);
}

template <typename S>
double ssim(const Tensor<S>& pred, const Tensor<S>& target, const SsimParams& p) {
  NoGradGuard ng;
  return mean(ssim_index(cast<double>(pred), cast<double>(target), p)).item();
}

template <typename S>
double msssim(const Tensor<S>& pred, const Tensor<S>& target, const SsimParams& p) {
  NoGradGuard ng;
  return mean(msssim_index(cast<double>(pred), cast<double>(target), p)).item();
}

template <typename S>
double dice(const Tensor<S>& pred_mask, const Tensor<S>& gt_mask) {
  require_same(pred_mask, gt_mask, "dice");
  require_binary(pred_mask, "dice prediction");
  require_binary(gt_mask, "dice reference");
  double inter = 0, a = 0, b = 0;
  for (Index i = 0; i < pred_mask.numel(); ++i) {
    const double p = pred_mask.raw()[i], g = gt_mask.raw()[i];
    inter += p * g;
    a += p;
    b += g;
  }
  if (a + b == 0) return 1.0;
  return 2 * inter / (a + b);
}

template <typename S>
Tensor<S> binarize(const Tensor<S>& values, bool logits) {
  Tensor<S> out = Tensor<S>::empty(values.shape());
  const S cut = logits ? S(0) : S(0.5);
  for (Index i = 0; i < values.numel(); ++i) out.raw()[i] = values.raw()[i] > cut ? S(1) : S(0);
  return out;
}

FeatureStats FeatureStats::from_samples(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw std::invalid_argument("feature statistics need n >= 2 samples");
  FeatureStats s;
  s.n = features.rows();
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(s.n - 1);
  return s;
}

double mfd(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() ||
      b.cov.rows() != b.mean.size() || a.cov.cols() != a.cov.rows() ||
      b.cov.cols() != b.cov.rows())
    throw std::invalid_argument("feature statistics have mismatched dimensions");
  if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite())
    throw NumericError("feature statistics contain NaN or Inf");
  require_symmetric(a.cov);
  require_symmetric(b.cov);
  // tr((S1 S2)^1/2) = tr((S1^1/2 S2 S1^1/2)^1/2), the inner matrix symmetric PSD.
  const Eigen::MatrixXd r = psd_sqrt(a.cov);
  Eigen::MatrixXd inner = r * b.cov * r;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = psd_sqrt(inner).trace();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * cross;
  return std::max(d, 0.0);
}

#define MCSAGAN_INSTANTIATE(S)                                                  \
  template double mse(const Tensor<S>&, const Tensor<S>&);                      \
  template double psnr(const Tensor<S>&, const Tensor<S>&, double);             \
  template double ssim(const Tensor<S>&, const Tensor<S>&, const SsimParams&);  \
  template double msssim(const Tensor<S>&, const Tensor<S>&, const SsimParams&); \
  template double dice(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> binarize(const Tensor<S>&, bool);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
