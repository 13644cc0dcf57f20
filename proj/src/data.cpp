#include "mcsagan/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <json.hpp>

namespace mcsagan {

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

// Raw intensities live on a scanner-like scale; noise_sigma is relative to it.
constexpr double kRawScale = 1000.0;

Index volume_index(const Dims3& d, Index z, Index y, Index x) { return (z * d[1] + y) * d[2] + x; }

Tensor<float> volume(const Dims3& d) { return Tensor<float>::zeros({d[0], d[1], d[2]}); }

Dims3 dims_of(const Tensor<float>& v) {
  if (v.ndim() != 3) throw ShapeError("expected a [D,H,W] volume, got " + to_string(v.shape()));
  return {v.dim(0), v.dim(1), v.dim(2)};
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Ellipsoid {
  std::array<double, 3> centre, radius;
  double rho(double z, double y, double x) const {
    const double a = (z - centre[0]) / radius[0], b = (y - centre[1]) / radius[1],
                 c = (x - centre[2]) / radius[2];
    return std::sqrt(a * a + b * b + c * c);
  }
};

template <typename F>
void for_each_voxel(const Dims3& d, F&& f) {
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[2]; ++x) f(z, y, x, volume_index(d, z, y, x));
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
    throw DataError(path + ": truncated header");
  return v;
}

constexpr const char* kSequenceKeys[] = {"t2f", "t1c", "t1n"};

}  // namespace

void validate_sample(const Sample& s) {
  const Dims3 d = dims_of(s.source);
  auto check = [&](const Tensor<float>& v, const std::string& what, bool binary) {
    if (!v.defined()) throw DataError(s.subject_id + ": missing " + what);
    if (dims_of(v) != d) throw DataError(s.subject_id + ": " + what + " dims differ from source");
    for (float x : v.data()) {
      if (!std::isfinite(x) || x < -1.0f || x > 1.0f)
        throw DataError(s.subject_id + ": " + what + " has values outside [-1,1]");
      if (binary && x != 0.0f && x != 1.0f)
        throw DataError(s.subject_id + ": mask is not binary");
    }
  };
  check(s.source, "source", false);
  for (int c = 0; c < kNumContrasts; ++c)
    check(s.targets[static_cast<std::size_t>(c)], contrast_name(static_cast<Contrast>(c)), false);
  check(s.mask, "mask", true);
}

void PhantomSpec::validate() const {
  for (Index d : dims)
    if (d < 8) throw std::invalid_argument("phantom dims must be >= 8");
  auto ordered = [](const Range& r) { return r.lo > 0 && r.lo <= r.hi; };
  if (blob_count[0] < 0 || blob_count[0] > blob_count[1])
    throw std::invalid_argument("phantom blob count range is invalid");
  if (!ordered(blob_radius) || !ordered(tumour_radius) || !ordered(tumour_fraction) ||
      tumour_fraction.hi >= 1)
    throw std::invalid_argument("phantom ranges must satisfy 0 < lo <= hi");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("phantom noise sigma must be >= 0");
}

PhantomFields phantom_fields(const PhantomSpec& spec) {
  spec.validate();
  const Dims3& d = spec.dims;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };
  const double smallest = static_cast<double>(std::min({d[0], d[1], d[2]}));

  Ellipsoid head;
  for (int a = 0; a < 3; ++a) {
    head.centre[a] = d[static_cast<std::size_t>(a)] * draw(0.48, 0.52);
    head.radius[a] = d[static_cast<std::size_t>(a)] * draw(0.40, 0.45);
  }
  struct Blob {
    std::array<double, 3> centre;
    double radius, amplitude;
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(
      std::uniform_int_distribution<int>(spec.blob_count[0], spec.blob_count[1])(rng)));
  for (Blob& b : blobs) {
    for (int a = 0; a < 3; ++a)
      b.centre[a] = head.centre[a] + head.radius[a] * draw(-0.7, 0.7);
    b.radius = smallest * draw(spec.blob_radius.lo, spec.blob_radius.hi);
    b.amplitude = draw(-1.5, 1.5);
  }

  PhantomFields f{volume(d), volume(d), volume(d), volume(d)};
  for_each_voxel(d, [&](Index z, Index y, Index x, Index i) {
    const double pz = z + 0.5, py = y + 0.5, px = x + 0.5;
    const double rho = head.rho(pz, py, px);
    if (rho > 1) return;
    double field = 1.2 * (1 - rho) - 0.3;
    for (const Blob& b : blobs) {
      const double dz = pz - b.centre[0], dy = py - b.centre[1], dx = px - b.centre[2];
      field += b.amplitude * std::exp(-(dz * dz + dy * dy + dx * dx) / (2 * b.radius * b.radius));
    }
    f.head.raw()[i] = 1.0f;
    f.anatomy.raw()[i] = static_cast<float>(logistic(2.5 * field));
  });

  // Redraw the tumour until its voxel fraction is inside the accepted range.
  const double total = static_cast<double>(d[0] * d[1] * d[2]);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200)
      throw std::invalid_argument("phantom tumour fraction range is unreachable for these dims");
    Ellipsoid t;
    for (int a = 0; a < 3; ++a) {
      t.centre[a] = head.centre[a] + head.radius[a] * draw(-0.45, 0.45);
      t.radius[a] = smallest * draw(spec.tumour_radius.lo, spec.tumour_radius.hi);
    }
    std::fill(f.mask.data().begin(), f.mask.data().end(), 0.0f);
    std::fill(f.rim.data().begin(), f.rim.data().end(), 0.0f);
    double count = 0;
    for_each_voxel(d, [&](Index z, Index y, Index x, Index i) {
      const double rho = t.rho(z + 0.5, y + 0.5, x + 0.5);
      if (rho > 1 || f.head.raw()[i] == 0.0f) return;
      f.mask.raw()[i] = 1.0f;
      f.rim.raw()[i] = static_cast<float>(std::clamp((rho - 0.55) / 0.45, 0.0, 1.0));
      ++count;
    });
    const double frac = count / total;
    if (frac >= spec.tumour_fraction.lo && frac <= spec.tumour_fraction.hi) break;
  }
  return f;
}

Tensor<float> render_sequence(const PhantomFields& f, bool source, Contrast contrast) {
  const Dims3 d = dims_of(f.anatomy);
  Tensor<float> out = volume(d);
  for (Index i = 0; i < out.numel(); ++i) {
    if (f.head.raw()[i] == 0.0f) continue;
    const double a = f.anatomy.raw()[i], m = f.mask.raw()[i], r = f.rim.raw()[i];
    double v;
    if (source) {
      v = 100 + 700 * std::pow(a, 0.8) + 350 * m;
    } else {
      switch (contrast) {
        case Contrast::kT2f: v = 120 + 600 * a + 300 * m * (1 - 0.5 * r); break;
        case Contrast::kT1c: v = 150 + 650 * std::pow(1 - a, 1.2) - 100 * m + 500 * r; break;
        case Contrast::kT1n: v = 130 + 550 * (1 - a) - 150 * m; break;
        default: throw std::invalid_argument("unknown contrast");
      }
    }
    out.raw()[i] = static_cast<float>(v);
  }
  return out;
}

Sample generate_phantom(const PhantomSpec& spec, const std::string& subject_id) {
  const PhantomFields f = phantom_fields(spec);
  // Noise uses its own stream so the fields do not depend on noise_sigma.
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma * kRawScale);
  auto finish = [&](Tensor<float> raw) {
    if (spec.noise_sigma > 0)
      for (float& v : raw.data()) v = static_cast<float>(v + noise(rng));
    return normalize_volume(raw);
  };
  Sample s;
  s.subject_id = subject_id.empty() ? "phantom_" + std::to_string(spec.seed) : subject_id;
  s.source = finish(render_sequence(f, true));
  for (int c = 0; c < kNumContrasts; ++c)
    s.targets[static_cast<std::size_t>(c)] = finish(render_sequence(f, false, static_cast<Contrast>(c)));
  s.mask = f.mask.clone();
  validate_sample(s);
  return s;
}

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty volume");
  if (!(q >= 0 && q <= 100)) throw std::invalid_argument("percentile q must lie in [0,100]");
  std::vector<float> v(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double x_lo = v[lo];
  if (lo + 1 >= v.size()) return x_lo;
  const double x_hi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return x_lo + (pos - static_cast<double>(lo)) * (x_hi - x_lo);
}

Tensor<float> normalize_volume(const Tensor<float>& v, NormalizeInfo* info) {
  if (v.numel() == 0) throw std::invalid_argument("cannot normalize an empty volume");
  NormalizeInfo local;
  local.lo = percentile(v.data(), 0.1);
  local.hi = percentile(v.data(), 99.9);
  Tensor<float> out = Tensor<float>::empty(v.shape());
  if (!(local.hi > local.lo)) {
    local.degenerate = true;
    std::clog << "warning: normalize_volume: constant intensity range, output set to -1\n";
    std::fill(out.data().begin(), out.data().end(), -1.0f);
  } else {
    const double scale = 2.0 / (local.hi - local.lo);
    for (Index i = 0; i < v.numel(); ++i) {
      const double c = std::clamp(static_cast<double>(v.raw()[i]), local.lo, local.hi);
      out.raw()[i] = static_cast<float>(std::clamp((c - local.lo) * scale - 1.0, -1.0, 1.0));
    }
  }
  if (info) *info = local;
  return out;
}

Tensor<float> binarize_labels(const Tensor<float>& labels) {
  Tensor<float> out = Tensor<float>::empty(labels.shape());
  for (Index i = 0; i < labels.numel(); ++i) out.raw()[i] = labels.raw()[i] != 0.0f ? 1.0f : 0.0f;
  return out;
}

Tensor<float> pad_to_grid(const Tensor<float>& v, const Dims3& target, float pad_value) {
  const Dims3 d = dims_of(v);
  Dims3 lead{};
  for (int a = 0; a < 3; ++a) {
    const Index deficit = target[static_cast<std::size_t>(a)] - d[static_cast<std::size_t>(a)];
    if (deficit < 0)
      throw ShapeError("pad_to_grid target " + std::to_string(target[static_cast<std::size_t>(a)]) +
                       " is smaller than the source extent " +
                       std::to_string(d[static_cast<std::size_t>(a)]));
    // Axial slices are appended; in-plane padding is centred.
    lead[static_cast<std::size_t>(a)] = a == 0 ? 0 : deficit / 2;
  }
  Tensor<float> out = Tensor<float>::full({target[0], target[1], target[2]}, pad_value);
  for (Index z = 0; z < d[0]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      std::copy_n(v.raw() + volume_index(d, z, y, 0), d[2],
                  out.raw() + volume_index(target, z + lead[0], y + lead[1], lead[2]));
  return out;
}

void write_volume(const std::string& path, const Tensor<float>& v) {
  if (v.ndim() < 1 || v.ndim() > 255) throw ShapeError("cannot store a rank-0 volume");
  for (float x : v.data())
    if (!std::isfinite(x)) throw DataError(path + ": refusing to write non-finite values");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write("MCSV", 4);
  put<std::uint8_t>(os, 1);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(v.ndim()));
  for (Index d : v.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put<std::uint8_t>(os, 0);
  os.write(reinterpret_cast<const char*>(v.raw()),
           static_cast<std::streamsize>(v.numel() * static_cast<Index>(sizeof(float))));
  if (!os) throw DataError("write to " + path + " failed");
}

Tensor<float> read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "MCSV", 4) != 0) throw DataError(path + ": bad magic");
  const auto version = get<std::uint8_t>(is, path);
  if (version != 1) throw DataError(path + ": unknown version " + std::to_string(version));
  Shape shape(get<std::uint8_t>(is, path));
  for (Index& d : shape) d = get<std::uint32_t>(is, path);
  const auto dtype = get<std::uint8_t>(is, path);
  if (dtype != 0) throw DataError(path + ": unknown dtype " + std::to_string(dtype));
  Tensor<float> v = Tensor<float>::empty(shape);
  const auto bytes = static_cast<std::streamsize>(v.numel() * static_cast<Index>(sizeof(float)));
  is.read(reinterpret_cast<char*>(v.raw()), bytes);
  if (is.gcount() != bytes) throw DataError(path + ": truncated payload");
  return v;
}

std::vector<std::vector<std::string>> dataset_split(const std::vector<std::string>& ids,
                                                    const std::vector<std::size_t>& counts,
                                                    std::uint64_t seed) {
  std::size_t need = 0;
  for (std::size_t c : counts) need += c;
  if (need > ids.size())
    throw std::invalid_argument("split sizes sum to " + std::to_string(need) + " but only " +
                                std::to_string(ids.size()) + " subjects exist");
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::string>> out;
  auto it = order.begin();
  for (std::size_t c : counts) {
    out.emplace_back(it, it + static_cast<std::ptrdiff_t>(c));
    it += static_cast<std::ptrdiff_t>(c);
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  nlohmann::json subjects = nlohmann::json::array();
  for (const Sample& s : samples) {
    validate_sample(s);
    nlohmann::json entry{{"id", s.subject_id}};
    auto store = [&](const std::string& key, const Tensor<float>& v) {
      const std::string file = s.subject_id + "_" + key + ".mcsv";
      write_volume((fs::path(dir) / file).string(), v);
      entry[key] = file;
    };
    store("t2w", s.source);
    for (int c = 0; c < kNumContrasts; ++c) store(kSequenceKeys[c], s.targets[static_cast<std::size_t>(c)]);
    store("mask", s.mask);
    subjects.push_back(entry);
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw DataError("cannot write manifest in " + dir);
  os << nlohmann::json{{"format", "MCSV1"}, {"subjects", subjects}}.dump(2) << "\n";
}

std::vector<Sample> read_dataset(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "manifest.json";
  std::ifstream is(manifest);
  if (!is) throw DataError("no manifest.json in " + dir);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  std::vector<Sample> out;
  try {
    for (const auto& e : j.at("subjects")) {
      Sample s;
      s.subject_id = e.at("id").get<std::string>();
      auto load = [&](const char* key) {
        return read_volume((fs::path(dir) / e.at(key).get<std::string>()).string());
      };
      s.source = load("t2w");
      for (int c = 0; c < kNumContrasts; ++c) s.targets[static_cast<std::size_t>(c)] = load(kSequenceKeys[c]);
      s.mask = binarize_labels(load("mask"));
      validate_sample(s);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  if (out.empty()) throw DataError(dir + ": dataset is empty");
  return out;
}

Tensor<float> stack_volumes(const std::vector<Tensor<float>>& vols) {
  if (vols.empty()) throw std::invalid_argument("cannot stack zero volumes");
  const Dims3 d = dims_of(vols[0]);
  const Index n = d[0] * d[1] * d[2];
  Tensor<float> out = Tensor<float>::empty({static_cast<Index>(vols.size()), 1, d[0], d[1], d[2]});
  for (std::size_t b = 0; b < vols.size(); ++b) {
    if (dims_of(vols[b]) != d) throw ShapeError("stack_volumes: dims differ");
    std::copy_n(vols[b].raw(), n, out.raw() + static_cast<Index>(b) * n);
  }
  return out;
}

}  // namespace mcsagan
