#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "mcsagan/data.hpp"

using namespace mcsagan;
namespace fs = std::filesystem;

namespace {

double sorted_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.raw(), b.raw(), static_cast<std::size_t>(a.numel()) * sizeof(float)) == 0;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mcsagan_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor<float> random_volume(Shape s, unsigned seed) {
  std::mt19937_64 rng(seed);
  return Tensor<float>::uniform(std::move(s), rng, -1.0f, 1.0f);
}

}  // namespace

TEST_CASE("phantoms are deterministic and valid") {
  PhantomSpec spec;
  spec.seed = 11;
  const Sample a = generate_phantom(spec, "s11"), b = generate_phantom(spec, "s11");
  CHECK(bitwise_equal(a.source, b.source));
  CHECK(bitwise_equal(a.mask, b.mask));
  for (int c = 0; c < kNumContrasts; ++c) CHECK(bitwise_equal(a.targets[c], b.targets[c]));
  CHECK(a.source.shape() == Shape{32, 32, 32});
  CHECK_NOTHROW(validate_sample(a));

  spec.seed = 12;
  CHECK_FALSE(bitwise_equal(generate_phantom(spec).source, a.source));
  CHECK(generate_phantom(spec).subject_id == "phantom_12");

  // The contrasts are genuinely different images.
  CHECK_FALSE(bitwise_equal(a.target(Contrast::kT2f), a.target(Contrast::kT1c)));
  CHECK_FALSE(bitwise_equal(a.target(Contrast::kT1c), a.target(Contrast::kT1n)));

  PhantomSpec bad;
  bad.tumour_fraction = {0.2, 0.1};
  CHECK_THROWS_AS(generate_phantom(bad), std::invalid_argument);
  bad = PhantomSpec{};
  bad.noise_sigma = -1;
  CHECK_THROWS_AS(generate_phantom(bad), std::invalid_argument);
  bad = PhantomSpec{};
  bad.dims = {4, 32, 32};
  CHECK_THROWS_AS(generate_phantom(bad), std::invalid_argument);
}

TEST_CASE("noise-free targets regenerate from the anatomy field") {
  PhantomSpec spec;
  spec.seed = 5;
  spec.noise_sigma = 0;
  const Sample s = generate_phantom(spec);
  const PhantomFields f = phantom_fields(spec);
  CHECK(bitwise_equal(s.mask, f.mask));
  CHECK(bitwise_equal(s.source, normalize_volume(render_sequence(f, true))));
  for (int c = 0; c < kNumContrasts; ++c)
    CHECK(bitwise_equal(s.targets[c], normalize_volume(render_sequence(f, false, static_cast<Contrast>(c)))));

  // Outside the tumour, each raw sequence is a strictly monotone function of
  // anatomy: sorting head voxels by anatomy sorts the intensities too.
  std::vector<Index> idx;
  for (Index i = 0; i < f.anatomy.numel(); ++i)
    if (f.head.raw()[i] == 1.0f && f.mask.raw()[i] == 0.0f) idx.push_back(i);
  REQUIRE(idx.size() > 1000);
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) { return f.anatomy.raw()[a] < f.anatomy.raw()[b]; });
  auto monotone = [&](const Tensor<float>& raw) {
    int sign = 0;
    for (std::size_t k = 1; k < idx.size(); ++k) {
      const float da = f.anatomy.raw()[idx[k]] - f.anatomy.raw()[idx[k - 1]];
      const float dv = raw.raw()[idx[k]] - raw.raw()[idx[k - 1]];
      if (da == 0) continue;
      const int s = dv > 0 ? 1 : (dv < 0 ? -1 : 0);
      if (sign == 0) sign = s;
      if (s != 0 && s != sign) return false;
    }
    return sign != 0;
  };
  CHECK(monotone(render_sequence(f, true)));
  for (int c = 0; c < kNumContrasts; ++c) CHECK(monotone(render_sequence(f, false, static_cast<Contrast>(c))));

  // Noise does not move the underlying geometry.
  spec.noise_sigma = 0.05;
  CHECK(bitwise_equal(generate_phantom(spec).mask, s.mask));
}

TEST_CASE("tumour fraction stays in bounds over 100 seeds") {
  PhantomSpec spec;
  spec.noise_sigma = 0;
  double lo = 1, hi = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    spec.seed = seed;
    const PhantomFields f = phantom_fields(spec);
    const double frac = std::accumulate(f.mask.data().begin(), f.mask.data().end(), 0.0) /
                        static_cast<double>(f.mask.numel());
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  CHECK(lo >= spec.tumour_fraction.lo);
  CHECK(hi <= spec.tumour_fraction.hi);
}

TEST_CASE("percentile matches a sorted-array oracle") {
  std::vector<float> v(1000);
  std::iota(v.begin(), v.end(), 0.0f);
  std::shuffle(v.begin(), v.end(), std::mt19937_64(1));
  CHECK(percentile(v, 0.1) == doctest::Approx(0.999).epsilon(1e-12));
  CHECK(percentile(v, 99.9) == doctest::Approx(998.001).epsilon(1e-12));
  CHECK(percentile(v, 0) == 0.0);
  CHECK(percentile(v, 100) == 999.0);
  CHECK_THROWS(percentile(std::vector<float>{}, 50));
  CHECK_THROWS(percentile(v, 101));

  std::mt19937_64 rng(2);
  std::normal_distribution<float> nd(3.0f, 7.0f);
  std::vector<float> big(1'000'000);
  for (float& x : big) x = nd(rng);
  const std::vector<double> as_double(big.begin(), big.end());
  for (double q : {0.1, 1.0, 37.5, 50.0, 99.9})
    CHECK(std::abs(percentile(big, q) - sorted_percentile(as_double, q)) <= 1e-9);
}

TEST_CASE("normalize_volume") {
  Tensor<float> ramp = Tensor<float>::empty({10, 10, 10});
  for (Index i = 0; i < 1000; ++i) ramp.raw()[i] = static_cast<float>(i);
  NormalizeInfo info;
  Tensor<float> n = normalize_volume(ramp, &info);
  CHECK(info.lo == doctest::Approx(0.999));
  CHECK(info.hi == doctest::Approx(998.001));
  CHECK(*std::min_element(n.data().begin(), n.data().end()) == -1.0f);
  CHECK(*std::max_element(n.data().begin(), n.data().end()) == 1.0f);
  CHECK(n.raw()[500] == doctest::Approx(2 * (500 - 0.999) / (998.001 - 0.999) - 1).epsilon(1e-6));

  // An outlier is clipped to p99.9 rather than compressing everything else.
  Tensor<float> out = random_volume({20, 20, 20}, 3);
  out.raw()[17] = 1e6f;
  std::vector<double> vals(out.data().begin(), out.data().end());
  const double p_lo = sorted_percentile(vals, 0.1), p_hi = sorted_percentile(vals, 99.9);
  CHECK(p_hi < 2.0);
  const Tensor<float> no = normalize_volume(out);
  CHECK(no.raw()[17] == 1.0f);
  CHECK(no.raw()[3] == doctest::Approx(2 * (std::clamp<double>(out.raw()[3], p_lo, p_hi) - p_lo) / (p_hi - p_lo) - 1)
                           .epsilon(1e-6));

  // Idempotent once clipped: with enough voxels saturated at both ends the
  // second pass clips nothing.
  Tensor<float> sat = random_volume({20, 20, 20}, 9);
  for (Index i = 0; i < 80; ++i) {
    sat.raw()[i * 50] = -5.0f;
    sat.raw()[i * 50 + 1] = 5.0f;
  }
  const Tensor<float> once = normalize_volume(sat);
  NormalizeInfo second;
  const Tensor<float> twice = normalize_volume(once, &second);
  CHECK(second.lo == -1.0);
  CHECK(second.hi == 1.0);
  float worst = 0;
  for (Index i = 0; i < once.numel(); ++i) worst = std::max(worst, std::abs(twice.raw()[i] - once.raw()[i]));
  CHECK(worst <= 1e-6f);

  NormalizeInfo deg;
  const Tensor<float> flat = normalize_volume(Tensor<float>::full({4, 4, 4}, 3.0f), &deg);
  CHECK(deg.degenerate);
  CHECK(std::all_of(flat.data().begin(), flat.data().end(), [](float x) { return x == -1.0f; }));

  const Tensor<float> labels = Tensor<float>::from_vector({5}, {0, 1, 2, 4, 0});
  const Tensor<float> bin = binarize_labels(labels);
  CHECK(std::vector<float>(bin.data().begin(), bin.data().end()) == std::vector<float>{0, 1, 1, 1, 0});
}

TEST_CASE("pad_to_grid") {
  Tensor<float> v = Tensor<float>::full({155, 240, 240}, 0.5f);
  const Tensor<float> p = pad_to_grid(v, {160, 256, 256}, -1.0f);
  REQUIRE(p.shape() == Shape{160, 256, 256});
  auto at = [&](Index z, Index y, Index x) { return p.raw()[(z * 256 + y) * 256 + x]; };
  // In-plane: 8 leading, 240 content, 8 trailing.
  CHECK(at(0, 7, 100) == -1.0f);
  CHECK(at(0, 8, 100) == 0.5f);
  CHECK(at(0, 247, 100) == 0.5f);
  CHECK(at(0, 248, 100) == -1.0f);
  CHECK(at(0, 100, 7) == -1.0f);
  CHECK(at(0, 100, 8) == 0.5f);
  CHECK(at(0, 100, 247) == 0.5f);
  CHECK(at(0, 100, 248) == -1.0f);
  // Axial: content at slices 0..154, five trailing pads.
  CHECK(at(154, 100, 100) == 0.5f);
  for (Index z = 155; z < 160; ++z) CHECK(at(z, 100, 100) == -1.0f);
  const double content = std::count(p.data().begin(), p.data().end(), 0.5f);
  CHECK(content == 155.0 * 240 * 240);

  const Tensor<float> r = random_volume({3, 4, 5}, 4);
  CHECK(bitwise_equal(pad_to_grid(r, {3, 4, 5}, -1.0f), r));

  // Odd deficit of 3: one leading, two trailing.
  const Tensor<float> odd = pad_to_grid(Tensor<float>::ones({1, 2, 2}), {1, 5, 2}, 0.0f);
  const std::vector<float> rows(odd.data().begin(), odd.data().end());
  CHECK(rows == std::vector<float>{0, 0, 1, 1, 1, 1, 0, 0, 0, 0});
  CHECK_THROWS_AS(pad_to_grid(r, {2, 4, 5}, 0.0f), ShapeError);
}

TEST_CASE("volume files") {
  const fs::path dir = scratch("io");
  const Tensor<float> v = random_volume({3, 5, 7}, 5);
  const std::string path = (dir / "v.mcsv").string();
  write_volume(path, v);
  CHECK(bitwise_equal(read_volume(path), v));
  CHECK(fs::file_size(path) == 4 + 1 + 1 + 3 * 4 + 1 + 105 * 4);

  // Header bytes follow the documented layout.
  {
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> head(19);
    is.read(reinterpret_cast<char*>(head.data()), 19);
    CHECK(std::string(head.begin(), head.begin() + 4) == "MCSV");
    CHECK(head[4] == 1);
    CHECK(head[5] == 3);
    CHECK(head[6] == 3);
    CHECK(head[10] == 5);
    CHECK(head[14] == 7);
    CHECK(head[18] == 0);
  }

  auto expect_error = [](const std::string& p, const std::string& what) {
    try {
      read_volume(p);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(what) != std::string::npos);
    }
  };
  fs::resize_file(path, fs::file_size(path) - 3);
  expect_error(path, "truncated payload");

  const std::string bad = (dir / "bad.mcsv").string();
  std::ofstream(bad, std::ios::binary) << "NOPE1234567890";
  expect_error(bad, "bad magic");
  write_volume(bad, v);
  {
    std::fstream f(bad, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    f.put(2);
  }
  expect_error(bad, "unknown version");
  write_volume(bad, v);
  {
    std::fstream f(bad, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(18);
    f.put(7);
  }
  expect_error(bad, "unknown dtype");
  expect_error((dir / "missing.mcsv").string(), "cannot open");

  Tensor<float> nan = v.clone();
  nan.raw()[0] = std::nanf("");
  CHECK_THROWS_AS(write_volume(path, nan), DataError);
  fs::remove_all(dir);
}

TEST_CASE("dataset split and storage") {
  std::vector<std::string> ids(1251);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = "BraTS-" + std::to_string(i);
  const auto parts = dataset_split(ids, {1061, 100, 10, 80}, 42);
  REQUIRE(parts.size() == 4);
  CHECK(parts[0].size() == 1061);
  CHECK(parts[1].size() == 100);
  CHECK(parts[2].size() == 10);
  CHECK(parts[3].size() == 80);
  std::set<std::string> all;
  for (const auto& p : parts) all.insert(p.begin(), p.end());
  CHECK(all.size() == 1251);
  CHECK(dataset_split(ids, {1061, 100, 10, 80}, 42) == parts);

  std::set<std::string> firsts;
  for (std::uint64_t seed = 0; seed < 20; ++seed) firsts.insert(dataset_split(ids, {1}, seed)[0][0]);
  CHECK(firsts.size() >= 18);
  CHECK_THROWS_AS(dataset_split(ids, {1000, 300}, 0), std::invalid_argument);

  const fs::path dir = scratch("dataset");
  std::vector<Sample> samples;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    PhantomSpec spec;
    spec.dims = {8, 12, 16};
    spec.seed = seed;
    samples.push_back(generate_phantom(spec, "p" + std::to_string(seed)));
  }
  write_dataset(dir.string(), samples);
  const std::vector<Sample> back = read_dataset(dir.string());
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].subject_id == samples[i].subject_id);
    CHECK(bitwise_equal(back[i].source, samples[i].source));
    CHECK(bitwise_equal(back[i].mask, samples[i].mask));
    for (int c = 0; c < kNumContrasts; ++c) CHECK(bitwise_equal(back[i].targets[c], samples[i].targets[c]));
  }
  const Tensor<float> batch = stack_volumes({samples[0].source, samples[1].source});
  CHECK(batch.shape() == Shape{2, 1, 8, 12, 16});
  CHECK(batch.raw()[8 * 12 * 16] == samples[1].source.raw()[0]);
  CHECK_THROWS_AS(stack_volumes({samples[0].source, Tensor<float>::zeros({8, 8, 8})}), ShapeError);

  std::ofstream(dir / "manifest.json") << "{\"subjects\": [{\"id\": \"x\"}]}";
  CHECK_THROWS_AS(read_dataset(dir.string()), DataError);
  CHECK_THROWS_AS(read_dataset((dir / "nowhere").string()), DataError);
  fs::remove_all(dir);

  Sample broken = samples[0];
  broken.mask = Tensor<float>::full(broken.mask.shape(), 0.5f);
  CHECK_THROWS_AS(validate_sample(broken), DataError);
}
