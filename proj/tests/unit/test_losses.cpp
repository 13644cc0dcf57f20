#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "mcsagan/losses.hpp"

using namespace mcsagan;
using testsupport::gradcheck;
using testsupport::randn;
using testsupport::T64;

namespace {

T64 from(Shape s, std::vector<double> v) { return T64::from_vector(std::move(s), std::move(v)); }

T64 random_mask(Shape s, unsigned seed, double p = 0.3) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bern(p);
  T64 m = T64::zeros(std::move(s));
  for (double& v : m.data()) v = bern(rng) ? 1.0 : 0.0;
  return m;
}

oracle::Vec vec(const T64& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("critic wasserstein loss") {
  CHECK(critic_wgan_loss(from({2}, {1, 2}), from({2}, {1, 2})).item() == 0.0);
  CHECK(critic_wgan_loss(from({1}, {1}), from({1}, {3})).item() == doctest::Approx(-2.0));
  T64 f = from({4}, {0.5, -1.0, 2.0, 0.25}), r = from({4}, {1.5, 0.0, -0.5, 3.0});
  double fm = 0, rm = 0;
  for (int i = 0; i < 4; ++i) {
    fm += f.raw()[i] / 4;
    rm += r.raw()[i] / 4;
  }
  CHECK(critic_wgan_loss(f, r).item() == doctest::Approx(fm - rm).epsilon(1e-14));
  CHECK(adversarial_loss(f).item() == doctest::Approx(-fm));
}

TEST_CASE("gradient penalty closed forms") {
  for (Index n : {8, 16, 64}) {
    CAPTURE(n);
    T64 real = randn({1, 1, 1, 1, n}, 1), fake = randn({1, 1, 1, 1, n}, 2);
    T64 src = T64::zeros(real.shape());
    Scorer<double> linear = [](const T64& y, const T64&) { return y; };
    const double expect = std::pow(std::sqrt(static_cast<double>(n)) - 1, 2);
    std::mt19937_64 rng(3);
    CHECK(gradient_penalty(linear, real, fake, src, rng).item() ==
          doctest::Approx(expect).epsilon(1e-10));
  }
  T64 real = randn({1, 1, 2, 2, 4}, 4), fake = randn({1, 1, 2, 2, 4}, 5), src = real;
  Scorer<double> mean_scorer = [](const T64& y, const T64&) { return mean(y); };
  std::mt19937_64 rng(6);
  CHECK(gradient_penalty(mean_scorer, real, fake, src, rng).item() ==
        doctest::Approx(0.5625).epsilon(1e-10));

  // Degenerate interpolation coefficients, and a batch where every sample
  // contributes (sqrt(N)-1)^2 independently.
  Scorer<double> quad = [](const T64& y, const T64&) { return square(y); };
  for (double u : {0.0, 1.0}) {
    const double gp = gradient_penalty(quad, real, fake, src, std::vector<double>{u}).item();
    CHECK(std::isfinite(gp));
    const T64& at = u == 1.0 ? real : fake;
    double norm = 0;
    for (double v : at.data()) norm += 4 * v * v;
    CHECK(gp == doctest::Approx(std::pow(std::sqrt(norm) - 1, 2)).epsilon(1e-10));
  }
  Scorer<double> linear = [](const T64& y, const T64&) { return y; };
  T64 batch = randn({3, 1, 2, 2, 2}, 7);
  std::mt19937_64 r2(8);
  CHECK(gradient_penalty(linear, batch, batch, batch, r2).item() ==
        doctest::Approx(std::pow(std::sqrt(8.0) - 1, 2)));
  CHECK_THROWS_AS(gradient_penalty(linear, batch, real, batch, r2), ShapeError);
}

TEST_CASE("gradient penalty is differentiable in the scorer's parameters") {
  T64 w = randn({1, 2, 3, 3, 3}, 9, 0.3);
  T64 real = randn({2, 1, 4, 4, 4}, 10), fake = randn({2, 1, 4, 4, 4}, 11);
  T64 src = randn({2, 1, 4, 4, 4}, 12);
  const std::vector<double> u{0.3, 0.8};
  auto f = [&](const std::vector<T64>& in) {
    Scorer<double> scorer = [&](const T64& y, const T64& x) {
      return square(conv3d<double>(concat<double>({y, x}, 1), in[0], std::nullopt, 1, 1));
    };
    return gradient_penalty(scorer, real, fake, src, u);
  };
  auto r = gradcheck(f, {w});
  CHECK_MESSAGE(r.ok(1e-4), r.where);
}

TEST_CASE("classification loss") {
  T64 codes = domain_codes<double>({Contrast::kT2f, Contrast::kT1n});
  CHECK(classification_loss(T64::zeros({2, 3}), codes).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(classification_loss(from({2, 3}, {20, 0, 0, 0, 0, 20}), codes).item() < 1e-8);
  T64 logits = randn({2, 3}, 13, 2.0);
  double expect = 0;
  for (int b = 0; b < 2; ++b) {
    const double* row = logits.raw() + 3 * b;
    double z = 0;
    for (int k = 0; k < 3; ++k) z += std::exp(row[k]);
    const int k = b == 0 ? 0 : 2;
    expect += -std::log(std::exp(row[k]) / z) / 2;
  }
  CHECK(classification_loss(logits, codes).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS(classification_loss(logits, T64::zeros({2, 3})));
}

TEST_CASE("reconstruction loss") {
  T64 y = randn({1, 1, 4, 4, 4}, 14);
  T64 ones = T64::ones(y.shape()), zeros = T64::zeros(y.shape());
  CHECK(reconstruction_loss(y, y, zeros, 4.0).item() == 0.0);
  CHECK(reconstruction_loss(add(y, ones), y, zeros, 4.0).item() == doctest::Approx(1.0));
  CHECK(reconstruction_loss(add(y, ones), y, ones, 4.0).item() == doctest::Approx(5.0));

  T64 pred = randn({2, 1, 4, 4, 4}, 15), target = randn({2, 1, 4, 4, 4}, 16);
  T64 mask = random_mask(pred.shape(), 17);
  double acc = 0;
  for (Index i = 0; i < pred.numel(); ++i)
    acc += (1 + 4 * mask.raw()[i]) * std::abs(target.raw()[i] - pred.raw()[i]);
  CHECK(reconstruction_loss(pred, target, mask, 4.0).item() ==
        doctest::Approx(acc / pred.numel()).epsilon(1e-12));

  // Strictly increasing in alpha while the in-mask error is nonzero.
  double prev = -1;
  for (double a : {0.0, 0.5, 1.0, 4.0, 10.0}) {
    const double v = reconstruction_loss(pred, target, mask, a).item();
    CHECK(v > prev);
    prev = v;
  }
  T64 bad = mask.clone();
  bad.raw()[0] = 0.5;
  CHECK_THROWS_AS(reconstruction_loss(pred, target, bad, 4.0), std::invalid_argument);
}

TEST_CASE("perceptual loss") {
  FeatureExtractor<double> fx;
  T64 y = randn({1, 1, 16, 16, 16}, 18), pred = randn({1, 1, 16, 16, 16}, 19);
  CHECK(perceptual_loss(y, y, fx).item() == 0.0);
  const double base = perceptual_loss(pred, y, fx).item();
  CHECK(base > 0);
  std::array<double, 4> doubled{};
  for (int k = 0; k < 4; ++k) doubled[k] = 2 * kPerceptualStageWeights[k];
  CHECK(perceptual_loss(pred, y, fx, doubled).item() == doctest::Approx(2 * base).epsilon(1e-12));

  // Each stage on its own, then weighted.
  double manual = 0;
  for (int k = 0; k < 4; ++k) {
    std::array<double, 4> one{};
    one[k] = 1.0;
    manual += kPerceptualStageWeights[k] * perceptual_loss(pred, y, fx, one).item();
  }
  CHECK(base == doctest::Approx(manual).epsilon(1e-12));
  auto fp = fx.features(pred), fy = fx.features(y);
  double direct = 0;
  for (int k = 0; k < 4; ++k) {
    double s = 0;
    for (Index i = 0; i < fp[k].numel(); ++i) s += std::abs(fp[k].raw()[i] - fy[k].raw()[i]);
    direct += kPerceptualStageWeights[k] * s / fp[k].numel();
  }
  CHECK(base == doctest::Approx(direct).epsilon(1e-12));

  // Gradient reaches the prediction and never the extractor.
  T64 p = pred.clone();
  p.set_requires_grad(true);
  backward(perceptual_loss(p, y, fx));
  CHECK(p.has_grad());
  ParamRegistry<double> reg;
  fx.collect(reg);
  for (auto& t : reg.params) CHECK_FALSE(t.tensor.has_grad());
}

TEST_CASE("ssim against the loop oracle") {
  const int D = 9, H = 10, W = 8;
  T64 a = randn({1, 1, D, H, W}, 20, 0.5);
  T64 b = add(a, randn({1, 1, D, H, W}, 21, 0.2));
  const auto ref = oracle::ssim_stats(vec(a), vec(b), D, H, W);
  CHECK(ssim_index(a, b).item() == doctest::Approx(ref[0]).epsilon(1e-12));

  // Two scales at 16^3: contrast at the fine scale, full SSIM at the coarse.
  T64 x = randn({1, 1, 16, 16, 16}, 22, 0.5);
  T64 y = add(mul_scalar(x, 0.7), randn({1, 1, 16, 16, 16}, 23, 0.2));
  CHECK(msssim_scales({16, 16, 16}) == 2);
  const auto s0 = oracle::ssim_stats(vec(x), vec(y), 16, 16, 16);
  int d, h, w;
  const auto xc = oracle::block_mean(vec(x), 16, 16, 16, 2, d, h, w);
  const auto yc = oracle::block_mean(vec(y), 16, 16, 16, 2, d, h, w);
  const auto s1 = oracle::ssim_stats(xc, yc, d, h, w);
  const double w0 = 0.0448 / (0.0448 + 0.2856), w1 = 0.2856 / (0.0448 + 0.2856);
  const double expect =
      2 * std::pow((1 + s0[1]) / 2, w0) * std::pow((1 + s1[0]) / 2, w1) - 1;
  CHECK(msssim_index(x, y).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ms-ssim loss behaviour") {
  CHECK(msssim_scales({32, 32, 32}) == 3);
  CHECK(msssim_scales({7, 7, 7}) == 1);
  CHECK(msssim_scales({200, 240, 240}) == 5);
  CHECK_THROWS_AS(msssim_scales({6, 32, 32}), ShapeError);

  T64 y = randn({2, 1, 16, 16, 16}, 24, 0.4);
  CHECK(std::abs(msssim_loss(y, y).item()) < 1e-6);

  // Zero-mean anti-correlated copy.
  T64 z = sub(y, T64::full(y.shape(), mean(y).item()));
  const double anti = msssim_loss(neg(z), z).item();
  CHECK(anti > 1.0);
  CHECK(anti <= 2.0);

  // Constant against constant + eps: loss falls to zero with eps.
  T64 c = T64::full({1, 1, 16, 16, 16}, 0.1);
  double prev = 3;
  for (double eps : {0.8, 0.4, 0.2, 0.1, 0.05, 0.01, 0.0}) {
    const double v = msssim_loss(add_scalar(c, eps), c).item();
    CHECK(v < prev);
    CHECK(v >= 0);
    prev = v;
  }
  CHECK(prev < 1e-12);
}

TEST_CASE("segmentation losses") {
  const Shape s{1, 1, 4, 4, 4};
  T64 m = T64::zeros(s);
  for (Index i = 0; i < 32; ++i) m.raw()[i] = 1;
  T64 sat = add_scalar(mul_scalar(m, 40.0), -20.0);
  CHECK(seg_consistency_from_logits(sat, m).item() < 1e-3);

  const double n = 64, sum_m = 32, eps = 1e-6;
  const double dice_term = 1 - (2 * 0.5 * sum_m + eps) / (0.5 * n + sum_m + eps);
  CHECK(bce_with_logits(T64::zeros(s), m).item() == doctest::Approx(std::log(2.0)));
  CHECK(seg_consistency_from_logits(T64::zeros(s), m).item() ==
        doctest::Approx(0.5 * std::log(2.0) + 0.5 * dice_term).epsilon(1e-12));

  T64 empty = T64::zeros(s), low = T64::full(s, -20.0);
  const double p = 1 / (1 + std::exp(20.0));
  const double bce = std::log1p(std::exp(-20.0));
  const double closed = 0.5 * bce + 0.5 * (1 - eps / (n * p + eps));
  CHECK(seg_consistency_from_logits(low, empty).item() == doctest::Approx(closed).epsilon(1e-9));
  // Once n*sigmoid(l) is far below eps the guard drives the Dice term to 0.
  CHECK(seg_consistency_from_logits(T64::full(s, -40.0), empty).item() < 1e-6);

  CHECK(segmenter_pretrain_loss(sat, m).item() < 1e-3);
  CHECK(soft_dice_loss(m, m).item() == 0.0);

  T64 logits = randn({2, 1, 4, 4, 4}, 25, 2.0), mask = random_mask({2, 1, 4, 4, 4}, 26);
  double inter = 0, sp = 0, sm = 0, b = 0;
  for (Index i = 0; i < logits.numel(); ++i) {
    const double l = logits.raw()[i], t = mask.raw()[i], pr = 1 / (1 + std::exp(-l));
    inter += pr * t;
    sp += pr;
    sm += t;
    b += -(t * std::log(pr) + (1 - t) * std::log(1 - pr));
  }
  const double ref = 1 - (2 * inter + eps) / (sp + sm + eps) + 0.5 * b / logits.numel();
  CHECK(segmenter_pretrain_loss(logits, mask).item() == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("seg-consistency requires a frozen segmenter") {
  std::mt19937_64 rng(27);
  Segmenter<double> seg(SegmenterConfig{}, rng);
  T64 pred = randn({1, 1, 8, 8, 8}, 28), mask = random_mask({1, 1, 8, 8, 8}, 29);
  T64 codes = domain_codes<double>({Contrast::kT1c});
  CHECK_THROWS_AS(seg_consistency_loss(pred, codes, mask, seg), AutogradError);
  seg.freeze();
  pred.set_requires_grad(true);
  backward(seg_consistency_loss(pred, codes, mask, seg));
  CHECK(pred.has_grad());
  ParamRegistry<double> reg;
  seg.collect(reg);
  for (auto& p : reg.params) CHECK_FALSE(p.tensor.has_grad());
}

TEST_CASE("loss totals") {
  auto one = [] { return T64::scalar(1.0); };
  LossWeights w;
  GeneratorParts<double> unit{one(), one(), one(), one(), one(), one()};
  auto g = generator_total(unit, w);
  CHECK(g.total.item() == doctest::Approx(47.8676).epsilon(1e-12));
  CHECK(std::abs(g.report.reconstructed_total() - g.report.total) <= 1e-6 * std::abs(g.report.total));

  auto zero = [] { return T64::scalar(0.0); };
  GeneratorParts<double> zeros{zero(), zero(), zero(), zero(), zero(), zero()};
  CHECK(generator_total(zeros, w).total.item() == 0.0);

  LossWeights no_seg = w;
  no_seg.seg = 0;
  auto ns = generator_total(unit, no_seg);
  CHECK(ns.total.item() == doctest::Approx(47.8676 - 1.0421));
  CHECK(ns.report.value("seg") == 1.0);
  CHECK(ns.report.reconstructed_total() == doctest::Approx(ns.total.item()));

  // Random parts reconstruct too.
  std::mt19937_64 rng(30);
  std::uniform_real_distribution<double> u(-3, 3);
  GeneratorParts<double> rp{T64::scalar(u(rng)), T64::scalar(u(rng)), T64::scalar(u(rng)),
                            T64::scalar(u(rng)), T64::scalar(u(rng)), T64::scalar(u(rng))};
  auto rr = generator_total(rp, w);
  CHECK(std::abs(rr.report.reconstructed_total() - rr.report.total) <=
        1e-6 * std::max(1.0, std::abs(rr.report.total)));

  GeneratorParts<double> missing = unit;
  missing.perc.reset();
  CHECK_THROWS_AS(generator_total(missing, w), std::invalid_argument);

  LossReport rep;
  CHECK(critic_total(T64::scalar(-2.0), T64::scalar(0.5), T64::scalar(1.1), w, &rep).item() ==
        doctest::Approx(3.50743).epsilon(1e-12));
  CHECK(rep.reconstructed_total() == doctest::Approx(3.50743));
  CHECK(critic_total(zero(), zero(), zero(), w).item() == 0.0);
  LossWeights no_gp = w;
  no_gp.gp = 0;
  CHECK(critic_total(T64::scalar(-2.0), T64::scalar(0.5), T64::scalar(1.1), no_gp).item() ==
        doctest::Approx(-2.0 + 0.4613 * 1.1));

  LossWeights bad = w;
  bad.rec = -1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("loss gradients on 8^3 volumes") {
  const Shape s{1, 1, 8, 8, 8};
  T64 target = randn(s, 31, 0.5), mask = random_mask(s, 32);
  T64 pred = randn(s, 33, 0.5);
  T64 codes = domain_codes<double>({Contrast::kT2f});

  SUBCASE("reconstruction") {
    auto r = gradcheck([&](const std::vector<T64>& in) {
      return reconstruction_loss(in[0], target, mask, 4.0);
    }, {pred});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
  }
  SUBCASE("perceptual") {
    FeatureExtractor<double> fx;
    auto r = gradcheck([&](const std::vector<T64>& in) {
      return perceptual_loss(in[0], target, fx);
    }, {pred});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
  }
  SUBCASE("ms-ssim") {
    auto r = gradcheck([&](const std::vector<T64>& in) { return msssim_loss(in[0], target); },
                       {pred});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
  }
  SUBCASE("seg consistency") {
    std::mt19937_64 rng(34);
    Segmenter<double> seg(SegmenterConfig{}, rng);
    seg.freeze();
    auto r = gradcheck([&](const std::vector<T64>& in) {
      return seg_consistency_loss(in[0], codes, mask, seg);
    }, {pred});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
  }
  SUBCASE("segmenter pretraining and classification") {
    auto r = gradcheck([&](const std::vector<T64>& in) {
      return segmenter_pretrain_loss(in[0], mask);
    }, {mul_scalar(pred, 3.0)});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
    auto c = gradcheck([&](const std::vector<T64>& in) {
      return classification_loss(in[0], domain_codes<double>({Contrast::kT1c, Contrast::kT2f}));
    }, {randn({2, 3}, 35)});
    CHECK_MESSAGE(c.ok(1e-4), c.where);
  }
  SUBCASE("adversarial terms through the critic") {
    PowerIterationFreeze freeze;
    std::mt19937_64 rng(36);
    CriticConfig cfg;
    cfg.base_width = 4;
    cfg.depth = 2;
    Critic<double> critic(cfg, rng);
    T64 src = randn(s, 37);
    auto r = gradcheck([&](const std::vector<T64>& in) {
      auto fake = Critic<double>::score(critic.forward(in[0], src).realism);
      auto real = Critic<double>::score(critic.forward(target, src).realism);
      return add(critic_wgan_loss(fake, real), adversarial_loss(fake));
    }, {pred});
    CHECK_MESSAGE(r.ok(1e-4), r.where);
    // Gradient penalty with the real critic, differentiated in its first weight.
    auto gp = gradcheck([&](const std::vector<T64>&) {
      Scorer<double> scorer = [&](const T64& y, const T64& x) {
        return critic.forward(y, x).realism;
      };
      return gradient_penalty(scorer, target, pred, src, std::vector<double>{0.4});
    }, {critic.trunk()[0].weight()}, 1e-6, 600, 24);
    CHECK_MESSAGE(gp.ok(1e-4), gp.where);
  }
}
