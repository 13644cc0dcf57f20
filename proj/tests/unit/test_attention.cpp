#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "mcsagan/attention.hpp"

using namespace mcsagan;
using testsupport::gradcheck;
using testsupport::randn;
using testsupport::T64;
using testsupport::weighted_sum;

namespace {

void zero(Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

// [1,C,N] sample -> per-channel rows
std::vector<std::vector<double>> channels(const T64& x) {
  const Index c = x.dim(1), n = x.numel() / c;
  std::vector<std::vector<double>> out(static_cast<size_t>(c));
  for (Index ch = 0; ch < c; ++ch) out[ch].assign(x.raw() + ch * n, x.raw() + (ch + 1) * n);
  return out;
}

std::vector<std::vector<double>> transpose(const std::vector<std::vector<double>>& m) {
  std::vector<std::vector<double>> t(m[0].size(), std::vector<double>(m.size()));
  for (size_t i = 0; i < m.size(); ++i)
    for (size_t j = 0; j < m[0].size(); ++j) t[j][i] = m[i][j];
  return t;
}

std::vector<double> flat(const T64& t) { return {t.data().begin(), t.data().end()}; }

// Dense non-local branch with strides 1, evaluated with explicit loops:
// W_O(softmax(Q K^T / sqrt(C')) V) for a single-sample input.
std::vector<std::vector<double>> nonlocal_oracle(const T64& x, Conv3dLayer<double>& th,
                                                 Conv3dLayer<double>& ph,
                                                 Conv3dLayer<double>& g,
                                                 Conv3dLayer<double>& wo) {
  PowerIterationFreeze freeze;
  auto xc = channels(x);
  const int cr = static_cast<int>(th.spec().out_ch);
  const int c = static_cast<int>(wo.spec().out_ch);
  auto q = oracle::pointwise(xc, flat(th.effective_weight()), flat(th.bias()), cr);
  auto k = oracle::pointwise(xc, flat(ph.effective_weight()), flat(ph.bias()), cr);
  auto v = oracle::pointwise(xc, flat(g.effective_weight()), flat(g.bias()), cr);
  auto y = oracle::attention(transpose(q), transpose(k), transpose(v));
  return oracle::pointwise(transpose(y), flat(wo.effective_weight()), flat(wo.bias()), c);
}

}  // namespace

TEST_CASE("plan_stride examples and minimality") {
  CHECK(plan_stride({32, 32, 32}, 4096) == 2);
  CHECK(plan_stride({8, 8, 8}, 512) == 1);
  // floor(16/9) = 1 already meets a cap of one token.
  CHECK(plan_stride({16, 16, 16}, 1) == oracle::min_stride(16, 16, 16, 1));
  CHECK(plan_stride({16, 16, 16}, 1) == 9);
  CHECK_THROWS(plan_stride({0, 4, 4}, 3));
  CHECK_THROWS(plan_stride({4, 4, 4}, 0));

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Index> dim(1, 80), cap(1, 5000);
  for (int i = 0; i < 2000; ++i) {
    const Dims3 d{dim(rng), dim(rng), dim(rng)};
    const Index t = cap(rng);
    const Index s = plan_stride(d, t);
    REQUIRE(s == oracle::min_stride(d[0], d[1], d[2], t));
  }
}

TEST_CASE("plan_attention examples") {
  AttentionBudget b;
  b.t_q = 512;
  AttentionPlan p = plan_attention({64, 64, 64}, b);
  CHECK(p.n_full == 262144);
  CHECK(p.mode == AttentionMode::kSEOnly);

  AttentionBudget g;
  g.t_q = g.t_kv = 4096;
  g.t_attn = 1000000;
  p = plan_attention({8, 8, 8}, g);
  CHECK(p.mode == AttentionMode::kPooled);
  CHECK(p.s_q == 1);
  CHECK(p.s_kv == 1);
  CHECK(p.n_q == 512);
  CHECK(p.m_k == 512);

  AttentionBudget tight;
  tight.t_q = 4096;
  tight.t_kv = 64;
  tight.t_attn = 1;
  p = plan_attention({16, 16, 16}, tight);
  CHECK(p.s_q == 1);
  CHECK(p.s_kv == 4);
  CHECK(p.mode == AttentionMode::kSEOnly);

  AttentionBudget bad;
  bad.alpha = 0;
  CHECK_THROWS(plan_attention({4, 4, 4}, bad));
}

TEST_CASE("MBHA zero-weight compositions") {
  std::mt19937_64 rng(2);
  AttentionBudget b;
  MBHABlock<double> block(16, b, rng);
  for (auto* l : {&block.theta(), &block.phi(), &block.g(), &block.out(), &block.se().w1(),
                  &block.se().w2()}) {
    zero(l->weight());
    zero(l->bias());
  }
  T64 x = randn({2, 16, 4, 4, 4}, 3);
  T64 y = block.forward(x);
  for (Index i = 0; i < x.numel(); ++i) CHECK(y.raw()[i] == doctest::Approx(1.1 * x.raw()[i]));
  CHECK(block.last_affinity_elements() == 64 * 64);

  AttentionBudget small;
  small.t_q = 4;
  MBHABlock<double> fs(16, small, rng);
  zero(fs.se().w1().weight());
  zero(fs.se().w1().bias());
  zero(fs.se().w2().weight());
  zero(fs.se().w2().bias());
  T64 y2 = fs.forward(x);  // 64 voxels > 8 * 4
  CHECK(fs.plan_for({4, 4, 4}).mode == AttentionMode::kSEOnly);
  for (Index i = 0; i < x.numel(); ++i) CHECK(y2.raw()[i] == doctest::Approx(1.1 * x.raw()[i]));
  CHECK(fs.last_affinity_elements() == 0);
}

TEST_CASE("MBHA matches the dense loop oracle when strides are 1") {
  std::mt19937_64 rng(4);
  AttentionBudget b;
  MBHABlock<double> block(8, b, rng, 20);
  for (auto* l : {&block.theta(), &block.phi(), &block.g(), &block.out()})
    l->bias() = randn(l->bias().shape(), 5, 0.1);
  T64 x = randn({1, 8, 4, 4, 4}, 6);
  PowerIterationFreeze freeze;
  T64 y = block.forward(x);
  T64 se = block.se().forward(x);
  auto nl = nonlocal_oracle(x, block.theta(), block.phi(), block.g(), block.out());
  for (Index c = 0; c < 8; ++c)
    for (Index v = 0; v < 64; ++v) {
      const Index at = c * 64 + v;
      const double ref = x.raw()[at] + 0.2 * nl[c][v] + 0.2 * se.raw()[at];
      CHECK(std::abs(y.raw()[at] - ref) <= 1e-5);
    }
}

TEST_CASE("MBHA pooled path, budgets and affinity rows") {
  std::mt19937_64 rng(7);
  AttentionBudget b;
  b.t_q = 64;
  b.t_kv = 27;
  b.t_attn = 64 * 27;
  MBHABlock<double> block(8, b, rng);
  T64 x = randn({2, 8, 8, 8, 8}, 8);
  T64 y = block.forward(x);
  CHECK(y.shape() == x.shape());
  const AttentionPlan& p = block.plan_for({8, 8, 8});
  CHECK(p.mode == AttentionMode::kPooled);
  CHECK(p.s_q == 2);
  CHECK(p.s_kv == 3);
  CHECK(block.last_affinity_elements() == p.n_q * p.m_k);
  CHECK(block.last_affinity_elements() <= b.t_attn);

  // Rows of the affinity sum to one.
  T64 q = randn({1, 8, 2, 2, 2}, 9), k = randn({1, 8, 3, 1, 2}, 10);
  T64 ones = T64::ones({1, 8, 3, 1, 2});
  T64 out = pooled_attention(q, k, ones, nullptr);
  for (double v : out.data()) CHECK(std::abs(v - 1.0) < 1e-6);
}

TEST_CASE("MBHA gradients on a 4^3 volume") {
  std::mt19937_64 rng(11);
  AttentionBudget b;
  b.t_q = 8;
  b.t_kv = 8;
  MBHABlock<double> block(4, b, rng, 20);
  PowerIterationFreeze freeze;
  T64 x = randn({1, 4, 4, 4, 4}, 12);
  CHECK(block.plan_for({4, 4, 4}).s_q == 2);
  auto r = gradcheck([&](auto& in) { return weighted_sum(block.forward(in[0])); }, {x});
  CAPTURE(r.where);
  CHECK(r.max_rel_error < 1e-4);

  AttentionBudget open;
  MBHABlock<double> full(4, open, rng, 20);
  auto r2 = gradcheck([&](auto& in) { return weighted_sum(full.forward(in[0])); }, {x});
  CHECK(r2.max_rel_error < 1e-4);
  // Non-spectral parameters (SE gate) as well.
  ParamRegistry<double> reg;
  full.se().collect(reg, "se");
  auto r3 = gradcheck([&](auto&) { return weighted_sum(full.forward(x)); }, reg.param_tensors());
  CHECK(r3.max_rel_error < 1e-4);
}

TEST_CASE("full self-attention") {
  std::mt19937_64 rng(13);
  SelfAttention3d<double> sa(8, 0.2, 1 << 20, rng, 20);

  SUBCASE("zero projections are the identity") {
    for (auto* l : {&sa.theta(), &sa.phi(), &sa.g(), &sa.out()}) {
      zero(l->weight());
      zero(l->bias());
    }
    T64 x = randn({2, 8, 2, 3, 2}, 14);
    CHECK(testsupport::max_abs_diff(sa.forward(x), x) == 0.0);
  }
  SUBCASE("single voxel: softmax over one key is 1") {
    PowerIterationFreeze freeze;
    T64 x = randn({1, 8, 1, 1, 1}, 15);
    T64 y = sa.forward(x);
    auto xc = channels(x);
    auto v = oracle::pointwise(xc, flat(sa.g().effective_weight()), flat(sa.g().bias()),
                               static_cast<int>(sa.reduced()));
    auto o = oracle::pointwise(v, flat(sa.out().effective_weight()), flat(sa.out().bias()), 8);
    for (Index c = 0; c < 8; ++c)
      CHECK(y.raw()[c] == doctest::Approx(x.raw()[c] + 0.2 * o[c][0]).epsilon(1e-12));
  }
  SUBCASE("permutation equivariance") {
    PowerIterationFreeze freeze;
    T64 x = randn({1, 8, 2, 2, 3}, 16);
    std::vector<Index> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(17));
    T64 xp = T64::zeros(x.shape());
    for (Index c = 0; c < 8; ++c)
      for (Index v = 0; v < 12; ++v) xp.raw()[c * 12 + v] = x.raw()[c * 12 + perm[v]];
    T64 y = sa.forward(x), yp = sa.forward(xp);
    for (Index c = 0; c < 8; ++c)
      for (Index v = 0; v < 12; ++v)
        CHECK(std::abs(yp.raw()[c * 12 + v] - y.raw()[c * 12 + perm[v]]) < 1e-6);
  }
  SUBCASE("cap is enforced") {
    SelfAttention3d<double> capped(8, 0.2, 63, rng);
    CHECK_THROWS_AS(capped.forward(randn({1, 8, 2, 2, 2}, 18)), std::invalid_argument);
    CHECK_NOTHROW(capped.forward(randn({1, 8, 7, 1, 1}, 18)));
  }
  SUBCASE("gradients") {
    PowerIterationFreeze freeze;
    T64 x = randn({2, 8, 2, 2, 2}, 19);
    auto r = gradcheck([&](auto& in) { return weighted_sum(sa.forward(in[0])); }, {x});
    CHECK(r.max_rel_error < 1e-4);
  }
}
