#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "../support/gradcheck.hpp"
#include "mcsagan/checkpoint.hpp"
#include "mcsagan/networks.hpp"

using namespace mcsagan;
using testsupport::randn;
using testsupport::T64;

namespace {

GeneratorConfig tiny_generator() {
  GeneratorConfig c;
  c.widths = {4, 8, 8};
  c.encoder_attention = {AttentionKind::kMBHA, AttentionKind::kMBHA, AttentionKind::kFull};
  c.decoder_attention = {AttentionKind::kFull, AttentionKind::kMBHA};
  c.head_width = 4;
  c.budget.t_q = c.budget.t_kv = 64;
  return c;
}

void zero(Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

}  // namespace

TEST_CASE("domain codes") {
  T64 c = domain_codes<double>({Contrast::kT1c, Contrast::kT2f});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) ==
        std::vector<double>{0, 1, 0, 1, 0, 0});
  CHECK_NOTHROW(validate_codes(c, 2));
  CHECK_THROWS(validate_codes(T64::zeros({2, 3}), 2));
  CHECK_THROWS(validate_codes(T64::ones({1, 3}), 1));
  CHECK_THROWS(validate_codes(c, 3));
  CHECK(parse_contrast("T1N") == Contrast::kT1n);
  CHECK_THROWS(parse_contrast("t2w"));
  T64 v = randn({2, 1, 2, 2, 2}, 1);
  T64 cat = with_codes(v, c);
  CHECK(cat.shape() == Shape{2, 4, 2, 2, 2});
  CHECK(cat.raw()[8 * 2] == 1.0);      // sample 0, channel 2 (t1c)
  CHECK(cat.raw()[32 + 8] == 1.0);     // sample 1, channel 1 (t2f)
}

TEST_CASE("generator shape, range and conditioning") {
  std::mt19937_64 rng(2);
  Generator<double> gen(tiny_generator(), rng);
  T64 x = randn({2, 1, 16, 8, 8}, 3);
  T64 a = gen.forward(x, domain_codes<double>({Contrast::kT2f, Contrast::kT2f}));
  CHECK(a.shape() == Shape{2, 1, 16, 8, 8});
  for (double v : a.data()) CHECK(std::abs(v) <= 1.0);
  T64 b = gen.forward(x, domain_codes<double>({Contrast::kT1n, Contrast::kT1c}));
  CHECK(testsupport::max_abs_diff(a, b) > 0);

  CHECK_THROWS_AS(gen.forward(randn({1, 1, 12, 8, 8}, 4),
                              domain_codes<double>({Contrast::kT2f})), ShapeError);
  CHECK_THROWS(gen.forward(x, T64::zeros({2, 3})));

  GeneratorConfig bad = tiny_generator();
  bad.decoder_attention.pop_back();
  CHECK_THROWS(Generator<double>(bad, rng));
}

TEST_CASE("generator desk configuration at 32^3") {
  std::mt19937_64 rng(5);
  GeneratorConfig c;
  c.budget.t_q = c.budget.t_kv = 512;
  c.budget.t_attn = 1 << 20;
  Generator<float> gen(c, rng);
  std::mt19937_64 data(6);
  auto x = Tensor<float>::uniform({1, 1, 32, 32, 32}, data, -1, 1);
  auto y = gen.forward(x, domain_codes<float>({Contrast::kT1c}));
  CHECK(y.shape() == x.shape());
  float m = 0;
  for (float v : y.data()) m = std::max(m, std::abs(v));
  CHECK(m <= 1.0f);
}

TEST_CASE("generator gradients reach every parameter") {
  std::mt19937_64 rng(7);
  Generator<double> gen(tiny_generator(), rng);
  ParamRegistry<double> reg;
  gen.collect(reg);
  T64 x = randn({1, 1, 8, 8, 8}, 8);
  backward(sum(gen.forward(x, domain_codes<double>({Contrast::kT1c}))));
  for (auto& p : reg.params) {
    CAPTURE(p.name);
    CHECK(p.tensor.has_grad());
  }
}

TEST_CASE("critic") {
  std::mt19937_64 rng(9);
  CriticConfig cfg;
  cfg.base_width = 4;
  cfg.depth = 3;
  Critic<double> critic(cfg, rng);
  T64 y = randn({2, 1, 32, 32, 32}, 10), x = randn({2, 1, 32, 32, 32}, 11);

  SUBCASE("map dims follow stride arithmetic") {
    auto out = critic.forward(y, x);
    // 32 -> 16 -> 8 -> 4 with k=4, p=1, s=2
    CHECK(out.realism.shape() == Shape{2, 1, 4, 4, 4});
    CHECK(out.logits.shape() == Shape{2, 3});
    Critic<double> deep(CriticConfig{}, rng);
    auto d = deep.forward(y, x).realism;
    for (int a = 2; a < 5; ++a) CHECK(d.dim(a) > 1);
    CHECK_THROWS_AS(critic.forward(y, randn({2, 1, 16, 32, 32}, 1)), ShapeError);
  }
  SUBCASE("zero weights give bias-only outputs") {
    ParamRegistry<double> reg;
    critic.collect(reg);
    for (auto& p : reg.params) zero(p.tensor);
    critic.realism_head().bias().raw()[0] = 0.7;
    for (int k = 0; k < 3; ++k) critic.class_head().layer().bias().raw()[k] = k - 1.0;
    auto out = critic.forward(y, x);
    for (double v : out.realism.data()) CHECK(v == doctest::Approx(0.7));
    for (Index b = 0; b < 2; ++b)
      for (int k = 0; k < 3; ++k) CHECK(out.logits.raw()[b * 3 + k] == doctest::Approx(k - 1.0));
  }
  SUBCASE("score gradient with respect to the target is nonzero") {
    PowerIterationFreeze freeze;
    T64 ys = randn({1, 1, 8, 8, 8}, 12), xs = randn({1, 1, 8, 8, 8}, 13);
    ys.set_requires_grad(true);
    auto g = grad(sum(Critic<double>::score(critic.forward(ys, xs).realism)), {ys});
    double norm = 0;
    for (double v : g[0].data()) norm += v * v;
    CHECK(norm > 0);
    // Finite-difference spot check on a few voxels.
    auto f = [&](const T64& t) {
      NoGradGuard ng;
      return Critic<double>::score(critic.forward(t, xs).realism).item();
    };
    for (Index k : {0, 100, 311, 511}) {
      T64 p = ys.detach().clone(), m = ys.detach().clone();
      p.raw()[k] += 1e-6;
      m.raw()[k] -= 1e-6;
      CHECK(g[0].raw()[k] == doctest::Approx((f(p) - f(m)) / 2e-6).epsilon(1e-5));
    }
  }
  SUBCASE("both heads depend on the shared trunk") {
    PowerIterationFreeze freeze;
    auto before = critic.forward(y, x);
    for (double& v : critic.trunk()[0].weight().data()) v *= 1.5 + 0.01 * v;
    auto after = critic.forward(y, x);
    CHECK(testsupport::max_abs_diff(before.realism, after.realism) > 0);
    CHECK(testsupport::max_abs_diff(before.logits, after.logits) > 0);
  }
}

TEST_CASE("segmenter") {
  std::mt19937_64 rng(14);
  Segmenter<double> seg(SegmenterConfig{}, rng);
  T64 y = randn({2, 1, 8, 12, 8}, 15);
  T64 logits = seg.forward(y, domain_codes<double>({Contrast::kT2f, Contrast::kT1n}));
  CHECK(logits.shape() == Shape{2, 1, 8, 12, 8});
  T64 p = sigmoid(logits);
  for (double v : p.data()) CHECK((v > 0 && v < 1));
  CHECK_THROWS_AS(seg.forward(randn({1, 1, 6, 8, 8}, 1),
                              domain_codes<double>({Contrast::kT2f})), ShapeError);

  Segmenter<double> down(SegmenterConfig{4, 8}, rng);
  CHECK(down.forward(randn({1, 4, 8, 8, 8}, 2)).shape() == Shape{1, 1, 8, 8, 8});

  seg.freeze();
  CHECK(seg.frozen());
  ParamRegistry<double> reg;
  seg.collect(reg);
  for (auto& t : reg.params) {
    CHECK(t.tensor.frozen());
    CHECK_THROWS_AS(t.tensor.set_requires_grad(true), AutogradError);
  }
  // Input still receives gradient through the frozen network.
  T64 yi = y.clone();
  yi.set_requires_grad(true);
  backward(sum(seg.forward(yi, domain_codes<double>({Contrast::kT2f, Contrast::kT1n}))));
  CHECK(yi.has_grad());
  for (auto& t : reg.params) CHECK_FALSE(t.tensor.has_grad());
}

TEST_CASE("feature extractor") {
  FeatureExtractor<double> fx;
  T64 x = randn({1, 1, 32, 32, 32}, 16);
  auto a = fx.features(x), b = fx.features(x);
  REQUIRE(a.size() == 4);
  for (size_t k = 0; k < 4; ++k) {
    CHECK(std::equal(a[k].data().begin(), a[k].data().end(), b[k].data().begin()));
    const Index expect = 32 >> (k + 2);
    CHECK(a[k].dim(2) == expect);
    CHECK(a[k].dim(1) == (Index{8} << k));
  }
  // Distances separate identical from noisy inputs.
  std::mt19937_64 rng(17);
  T64 noisy = add(x, T64::randn(x.shape(), rng, 0.1));
  auto n = fx.features(noisy);
  double self = 0, other = 0;
  for (size_t k = 0; k < 4; ++k) {
    self += testsupport::max_abs_diff(a[k], b[k]);
    other += testsupport::max_abs_diff(a[k], n[k]);
  }
  CHECK(self == 0.0);
  CHECK(other > 0.0);
  CHECK_THROWS_AS(fx.features(randn({1, 1, 4, 8, 8}, 1)), ShapeError);

  // Two extractors share the fixed initialization.
  FeatureExtractor<double> other_fx;
  auto c = other_fx.features(x);
  CHECK(std::equal(a[3].data().begin(), a[3].data().end(), c[3].data().begin()));

  // Weights never receive gradient; inputs do.
  T64 xi = x.clone();
  xi.set_requires_grad(true);
  backward(sum(fx.features(xi)[3]));
  CHECK(xi.has_grad());
  ParamRegistry<double> reg;
  fx.collect(reg);
  for (auto& p : reg.params) CHECK_FALSE(p.tensor.has_grad());
}

TEST_CASE("feature extractor weight loading hook") {
  const auto dir = std::filesystem::temp_directory_path() / "mcsagan_fx_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "fx.mcsc").string();
  FeatureExtractorConfig other;
  other.seed = 99;
  FeatureExtractor<float> src(other);
  ParamRegistry<float> reg;
  src.collect(reg);
  write_archive(path, "{}", snapshot(reg));

  FeatureExtractor<float> dst;
  std::mt19937_64 rng(1);
  auto x = Tensor<float>::randn({1, 1, 16, 16, 16}, rng);
  auto before = dst.pooled(x);
  dst.load_weights(path);
  auto after = dst.pooled(x), ref = src.pooled(x);
  CHECK(std::equal(after.data().begin(), after.data().end(), ref.data().begin()));
  CHECK_FALSE(std::equal(after.data().begin(), after.data().end(), before.data().begin()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("parameter counts match the golden file") {
  std::ifstream in(MCSAGAN_TEST_DATA_DIR "/param_counts.json");
  REQUIRE(in);
  const auto golden = nlohmann::json::parse(in);
  std::mt19937_64 rng(1);
  GeneratorConfig gc;
  Generator<float> gen(gc, rng);
  Critic<float> critic(CriticConfig{}, rng);
  Segmenter<float> seg(SegmenterConfig{}, rng);
  FeatureExtractor<float> fx;
  auto count = [](const auto& model) {
    ParamRegistry<float> reg;
    model.collect(reg);
    return reg.param_count();
  };
  CHECK(count(gen) == golden.at("generator").get<Index>());
  CHECK(count(critic) == golden.at("critic").get<Index>());
  CHECK(count(seg) == golden.at("segmenter").get<Index>());
  CHECK(count(fx) == golden.at("feature_extractor").get<Index>());
  // Critic by hand: convs 2->16->32->64->128 (k=4, with bias), 3^3 head, dense 128->3.
  const Index critic_hand = (2 * 16 * 64 + 16) + (16 * 32 * 64 + 32) + (32 * 64 * 64 + 64) +
                            (64 * 128 * 64 + 128) + (128 * 27 + 1) + (128 * 3 + 3);
  CHECK(count(critic) == critic_hand);
}

TEST_CASE("archive round trip and errors") {
  const auto dir = std::filesystem::temp_directory_path() / "mcsagan_archive_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "a.mcsc").string();
  std::mt19937_64 rng(3);
  std::vector<NamedTensor<float>> entries{{"a", Tensor<float>::randn({2, 3}, rng)},
                                          {"b.c", Tensor<float>::randn({4}, rng)},
                                          {"s", Tensor<float>::scalar(2.5f)}};
  write_archive(path, R"({"k":1})", entries);
  Archive back = read_archive(path);
  CHECK(back.header == R"({"k":1})");
  REQUIRE(back.entries.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.entries[i].name == entries[i].name);
    CHECK(back.entries[i].tensor.shape() == entries[i].tensor.shape());
    CHECK(std::equal(back.entries[i].tensor.data().begin(), back.entries[i].tensor.data().end(),
                     entries[i].tensor.data().begin()));
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_WITH(read_archive(path), doctest::Contains("truncated"));
  std::ofstream(path, std::ios::binary) << "XXXXjunk";
  CHECK_THROWS_WITH(read_archive(path), doctest::Contains("bad magic"));
  std::filesystem::remove_all(dir);
}
