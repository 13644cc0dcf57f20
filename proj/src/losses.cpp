#include "mcsagan/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mcsagan/autograd.hpp"
#include "mcsagan/ops.hpp"

namespace mcsagan {

void LossWeights::validate() const {
  for (double v : {rec, msssim, perc, seg, cls, gp, alpha_mask})
    if (!(v >= 0) || !std::isfinite(v))
      throw std::invalid_argument("loss weights must be finite and non-negative");
}

double LossReport::reconstructed_total() const {
  double t = 0;
  for (const auto& term : terms) t += term.weight * term.value;
  return t;
}

double LossReport::value(const std::string& name) const {
  for (const auto& term : terms)
    if (term.name == name) return term.value;
  throw std::out_of_range("loss report has no term " + name);
}

namespace {

template <typename S>
void require_same(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
}

// [B, ...] -> [B] by averaging everything after the batch axis.
template <typename S>
Tensor<S> per_sample_mean(const Tensor<S>& t) {
  const Index b = t.dim(0);
  return reshape(mean_axis(reshape(t, {b, t.numel() / b}), 1), {b});
}

template <typename S>
Tensor<S> per_sample_sum(const Tensor<S>& t) {
  const Index b = t.dim(0);
  return reshape(sum_axis(reshape(t, {b, t.numel() / b}), 1), {b});
}

template <typename S>
Tensor<S> gaussian_window(const SsimParams& p) {
  const Index k = p.window;
  std::vector<double> g(static_cast<std::size_t>(k));
  double total = 0;
  for (Index i = 0; i < k; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(k - 1) / 2;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * p.sigma * p.sigma));
    total += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= total;
  Tensor<S> w = Tensor<S>::empty({1, 1, k, k, k});
  S* out = w.raw();
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b)
      for (Index c = 0; c < k; ++c)
        *out++ = static_cast<S>(g[static_cast<std::size_t>(a)] *
                                g[static_cast<std::size_t>(b)] *
                                g[static_cast<std::size_t>(c)]);
  return w;
}

template <typename S>
struct SsimMaps {
  Tensor<S> luminance;  // [N,1,d,h,w]
  Tensor<S> contrast;   // contrast-structure term
};

// a, b: [N,1,D,H,W]. Valid (unpadded) Gaussian filtering.
template <typename S>
SsimMaps<S> ssim_maps(const Tensor<S>& a, const Tensor<S>& b, const SsimParams& p) {
  const Index n = a.dim(0);
  const Tensor<S> w = gaussian_window<S>(p);
  const Tensor<S> stacked = concat<S>({a, b, square(a), square(b), mul(a, b)}, 0);
  const Tensor<S> f = conv3d<S>(stacked, w, std::nullopt, 1, 0);
  const Tensor<S> mu_a = slice(f, 0, 0, n), mu_b = slice(f, 0, n, n);
  const Tensor<S> mu_aa = mul(mu_a, mu_a), mu_bb = mul(mu_b, mu_b), mu_ab = mul(mu_a, mu_b);
  const Tensor<S> var_a = sub(slice(f, 0, 2 * n, n), mu_aa);
  const Tensor<S> var_b = sub(slice(f, 0, 3 * n, n), mu_bb);
  const Tensor<S> cov = sub(slice(f, 0, 4 * n, n), mu_ab);
  const S c1 = static_cast<S>(std::pow(p.k1 * p.data_range, 2));
  const S c2 = static_cast<S>(std::pow(p.k2 * p.data_range, 2));
  SsimMaps<S> m;
  m.luminance = div(add_scalar(mul_scalar(mu_ab, S(2)), c1), add_scalar(add(mu_aa, mu_bb), c1));
  m.contrast = div(add_scalar(mul_scalar(cov, S(2)), c2), add_scalar(add(var_a, var_b), c2));
  return m;
}

// [B,C,D,H,W] -> [B*C,1,D,H,W]
template <typename S>
Tensor<S> fold_channels(const Tensor<S>& x) {
  if (x.ndim() != 5) throw ShapeError("SSIM expects [B,C,D,H,W], got " + to_string(x.shape()));
  return reshape(x, {x.dim(0) * x.dim(1), 1, x.dim(2), x.dim(3), x.dim(4)});
}

template <typename S>
Tensor<S> unfold_mean(const Tensor<S>& per_item, Index batch, Index channels) {
  return reshape(mean_axis(reshape(per_item, {batch, channels}), 1), {batch});
}

}  // namespace

template <typename S>
void require_binary(const Tensor<S>& mask, const char* what) {
  for (S v : mask.data())
    if (v != S(0) && v != S(1))
      throw std::invalid_argument(std::string(what) + ": mask must be binary");
}

template <typename S>
Tensor<S> critic_wgan_loss(const Tensor<S>& score_fake, const Tensor<S>& score_real) {
  return sub(mean(score_fake), mean(score_real));
}

template <typename S>
Tensor<S> adversarial_loss(const Tensor<S>& score_fake) {
  return neg(mean(score_fake));
}

template <typename S>
Tensor<S> gradient_penalty(const Scorer<S>& scorer, const Tensor<S>& y_real,
                           const Tensor<S>& y_fake, const Tensor<S>& source,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<S> u(static_cast<std::size_t>(y_real.dim(0)));
  for (S& v : u) v = static_cast<S>(unif(rng));
  return gradient_penalty(scorer, y_real, y_fake, source, u);
}

template <typename S>
Tensor<S> gradient_penalty(const Scorer<S>& scorer, const Tensor<S>& y_real,
                           const Tensor<S>& y_fake, const Tensor<S>& source,
                           const std::vector<S>& u) {
  require_same(y_real, y_fake, "gradient_penalty");
  const Index b = y_real.dim(0);
  if (static_cast<Index>(u.size()) != b)
    throw ShapeError("gradient_penalty needs one interpolation coefficient per sample");
  // The interpolate is a fresh leaf: the penalty differentiates the scorer
  // only, never the generator that produced y_fake.
  Tensor<S> mixed = Tensor<S>::empty(y_real.shape());
  const Index per = y_real.numel() / b;
  for (Index i = 0; i < b; ++i) {
    const S ui = u[static_cast<std::size_t>(i)];
    for (Index j = 0; j < per; ++j) {
      const Index k = i * per + j;
      mixed.raw()[k] = ui * y_real.raw()[k] + (S(1) - ui) * y_fake.raw()[k];
    }
  }
  mixed.set_requires_grad(true);
  EnableGradGuard on;
  const Tensor<S> target = sum(scorer(mixed, source));
  const Tensor<S> g = grad(target, {mixed}, /*create_graph=*/true)[0];
  // Tiny offset keeps the square root differentiable at a zero gradient.
  const Tensor<S> norm = sqrt(add_scalar(per_sample_sum(square(g)), S(1e-12)));
  return mean(square(add_scalar(norm, S(-1))));
}

template <typename S>
Tensor<S> classification_loss(const Tensor<S>& logits, const Tensor<S>& codes) {
  if (logits.ndim() != 2 || logits.dim(1) != kNumContrasts)
    throw ShapeError("classification logits must be [B,3], got " + to_string(logits.shape()));
  validate_codes(codes, logits.dim(0));
  const Tensor<S> picked = sum(mul(log_softmax(logits, 1), codes));
  return mul_scalar(picked, S(-1) / static_cast<S>(logits.dim(0)));
}

template <typename S>
Tensor<S> critic_total(const Tensor<S>& wgan, const Tensor<S>& gp, const Tensor<S>& cls,
                       const LossWeights& w, LossReport* report) {
  Tensor<S> total = add(add(wgan, mul_scalar(gp, static_cast<S>(w.gp))),
                        mul_scalar(cls, static_cast<S>(w.cls)));
  if (report) {
    report->terms = {{"wgan", static_cast<double>(wgan.item()), 1.0},
                     {"gp", static_cast<double>(gp.item()), w.gp},
                     {"cls", static_cast<double>(cls.item()), w.cls}};
    report->total = static_cast<double>(total.item());
  }
  return total;
}

template <typename S>
Tensor<S> reconstruction_loss(const Tensor<S>& pred, const Tensor<S>& target,
                              const Tensor<S>& mask, double alpha_mask) {
  require_same(pred, target, "reconstruction_loss");
  require_same(pred, mask, "reconstruction_loss mask");
  require_binary(mask, "reconstruction_loss");
  const Tensor<S> weight = add_scalar(mul_scalar(mask, static_cast<S>(alpha_mask)), S(1));
  return mean(mul(weight, abs(sub(target, pred))));
}

template <typename S>
Tensor<S> perceptual_loss(const Tensor<S>& pred, const Tensor<S>& target,
                          const FeatureExtractor<S>& extractor,
                          const std::array<double, 4>& stage_weights) {
  require_same(pred, target, "perceptual_loss");
  std::vector<Tensor<S>> ref;
  {
    NoGradGuard ng;
    ref = extractor.features(target.detach());
  }
  const std::vector<Tensor<S>> got = extractor.features(pred);
  Tensor<S> total;
  for (std::size_t k = 0; k < got.size(); ++k) {
    Tensor<S> term = mul_scalar(mean(abs(sub(ref[k], got[k]))), static_cast<S>(stage_weights[k]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Index msssim_scales(const Dims3& dims, const SsimParams& p) {
  const Index smallest = std::min({dims[0], dims[1], dims[2]});
  if (smallest < p.window)
    throw ShapeError("SSIM needs every spatial dim >= " + std::to_string(p.window) +
                     ", got " + std::to_string(smallest));
  Index m = 1;
  while (m < static_cast<Index>(kMsssimWeights.size()) && (smallest >> m) >= p.window) ++m;
  return m;
}

template <typename S>
Tensor<S> ssim_index(const Tensor<S>& a, const Tensor<S>& b, const SsimParams& p) {
  require_same(a, b, "ssim");
  msssim_scales(spatial_dims(a), p);
  const SsimMaps<S> m = ssim_maps(fold_channels(a), fold_channels(b), p);
  return unfold_mean(per_sample_mean(mul(m.luminance, m.contrast)), a.dim(0), a.dim(1));
}

template <typename S>
Tensor<S> msssim_index(const Tensor<S>& a, const Tensor<S>& b, const SsimParams& p) {
  require_same(a, b, "msssim");
  const Index scales = msssim_scales(spatial_dims(a), p);
  double wsum = 0;
  for (Index j = 0; j < scales; ++j) wsum += kMsssimWeights[static_cast<std::size_t>(j)];

  Tensor<S> x = fold_channels(a), y = fold_channels(b);
  // Each per-scale term lies in [-1,1]; it is mapped to [0,1] before the
  // fractional power and the product mapped back, so the index stays in
  // [-1,1] and equals 1 exactly when every term does.
  Tensor<S> prod;
  for (Index j = 0; j < scales; ++j) {
    if (j > 0) {
      x = avg_pool3d(x, 2);
      y = avg_pool3d(y, 2);
    }
    const SsimMaps<S> m = ssim_maps(x, y, p);
    const Tensor<S> term =
        per_sample_mean(j + 1 == scales ? mul(m.luminance, m.contrast) : m.contrast);
    const S weight = static_cast<S>(kMsssimWeights[static_cast<std::size_t>(j)] / wsum);
    const Tensor<S> factor = pow(mul_scalar(add_scalar(term, S(1)), S(0.5)), weight);
    prod = prod.defined() ? mul(prod, factor) : factor;
  }
  return unfold_mean(add_scalar(mul_scalar(prod, S(2)), S(-1)), a.dim(0), a.dim(1));
}

template <typename S>
Tensor<S> msssim_loss(const Tensor<S>& pred, const Tensor<S>& target, const SsimParams& p) {
  return add_scalar(neg(mean(msssim_index(pred, target, p))), S(1));
}

template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& mask) {
  require_same(logits, mask, "bce_with_logits");
  return mean(sub(softplus(logits), mul(mask, logits)));
}

template <typename S>
Tensor<S> soft_dice_loss(const Tensor<S>& prob, const Tensor<S>& mask, double eps) {
  require_same(prob, mask, "soft_dice_loss");
  const S e = static_cast<S>(eps);
  const Tensor<S> num = add_scalar(mul_scalar(sum(mul(prob, mask)), S(2)), e);
  const Tensor<S> den = add_scalar(add(sum(prob), sum(mask)), e);
  return add_scalar(neg(div(num, den)), S(1));
}

template <typename S>
Tensor<S> seg_consistency_loss(const Tensor<S>& pred, const Tensor<S>& codes,
                               const Tensor<S>& mask, const Segmenter<S>& segmenter) {
  if (!segmenter.frozen())
    throw AutogradError("segmentation-consistency loss requires a frozen segmenter");
  ParamRegistry<S> reg;
  segmenter.collect(reg);
  for (const auto& p : reg.params)
    if (p.tensor.has_grad() || p.tensor.requires_grad())
      throw AutogradError("segmenter weight " + p.name + " is receiving gradients");
  return seg_consistency_from_logits(segmenter.forward(pred, codes), mask);
}

template <typename S>
Tensor<S> seg_consistency_from_logits(const Tensor<S>& logits, const Tensor<S>& mask) {
  require_binary(mask, "seg_consistency_loss");
  return add(mul_scalar(bce_with_logits(logits, mask), S(0.5)),
             mul_scalar(soft_dice_loss(sigmoid(logits), mask), S(0.5)));
}

template <typename S>
Tensor<S> segmenter_pretrain_loss(const Tensor<S>& logits, const Tensor<S>& mask) {
  require_binary(mask, "segmenter_pretrain_loss");
  return add(soft_dice_loss(sigmoid(logits), mask),
             mul_scalar(bce_with_logits(logits, mask), S(0.5)));
}

template <typename S>
GeneratorLoss<S> generator_total(const GeneratorParts<S>& parts, const LossWeights& w) {
  const std::pair<const char*, const std::optional<Tensor<S>>*> named[] = {
      {"adv", &parts.adv},   {"cls", &parts.cls},   {"rec", &parts.rec},
      {"seg", &parts.seg},   {"perc", &parts.perc}, {"msssim", &parts.msssim}};
  const double weights[] = {1.0, w.cls, w.rec, w.seg, w.perc, w.msssim};
  GeneratorLoss<S> out;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& [name, part] = named[i];
    if (!part->has_value() || !(*part)->defined())
      throw std::invalid_argument(std::string("generator loss part '") + name + "' is missing");
    const Tensor<S>& t = **part;
    if (t.numel() != 1)
      throw ShapeError(std::string("generator loss part '") + name + "' is not a scalar");
    const Tensor<S> term = weights[i] == 1.0 ? t : mul_scalar(t, static_cast<S>(weights[i]));
    out.total = out.total.defined() ? add(out.total, term) : term;
    out.report.terms.push_back({name, static_cast<double>(t.item()), weights[i]});
  }
  out.report.total = static_cast<double>(out.total.item());
  return out;
}

#define MCSAGAN_INSTANTIATE(S)                                                              \
  template void require_binary(const Tensor<S>&, const char*);                              \
  template Tensor<S> critic_wgan_loss(const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> adversarial_loss(const Tensor<S>&);                                    \
  template Tensor<S> gradient_penalty(const Scorer<S>&, const Tensor<S>&, const Tensor<S>&, \
                                      const Tensor<S>&, std::mt19937_64&);                  \
  template Tensor<S> gradient_penalty(const Scorer<S>&, const Tensor<S>&, const Tensor<S>&, \
                                      const Tensor<S>&, const std::vector<S>&);             \
  template Tensor<S> classification_loss(const Tensor<S>&, const Tensor<S>&);               \
  template Tensor<S> critic_total(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,     \
                                  const LossWeights&, LossReport*);                         \
  template Tensor<S> reconstruction_loss(const Tensor<S>&, const Tensor<S>&,                \
                                         const Tensor<S>&, double);                         \
  template Tensor<S> perceptual_loss(const Tensor<S>&, const Tensor<S>&,                    \
                                     const FeatureExtractor<S>&, const std::array<double, 4>&); \
  template Tensor<S> ssim_index(const Tensor<S>&, const Tensor<S>&, const SsimParams&);     \
  template Tensor<S> msssim_index(const Tensor<S>&, const Tensor<S>&, const SsimParams&);   \
  template Tensor<S> msssim_loss(const Tensor<S>&, const Tensor<S>&, const SsimParams&);    \
  template Tensor<S> bce_with_logits(const Tensor<S>&, const Tensor<S>&);                   \
  template Tensor<S> soft_dice_loss(const Tensor<S>&, const Tensor<S>&, double);            \
  template Tensor<S> seg_consistency_loss(const Tensor<S>&, const Tensor<S>&,               \
                                          const Tensor<S>&, const Segmenter<S>&);           \
  template Tensor<S> seg_consistency_from_logits(const Tensor<S>&, const Tensor<S>&);      \
  template Tensor<S> segmenter_pretrain_loss(const Tensor<S>&, const Tensor<S>&);           \
  template GeneratorLoss<S> generator_total(const GeneratorParts<S>&, const LossWeights&);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
