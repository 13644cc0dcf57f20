#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcsagan/networks.hpp"
#include "mcsagan/tensor.hpp"

namespace mcsagan {

/// Malformed files, manifests or datasets (the CLI maps these to exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One subject. Volumes are [D,H,W] in [-1,1]; the mask is binary.
struct Sample {
  std::string subject_id;
  Tensor<float> source;                        // T2w
  std::array<Tensor<float>, kNumContrasts> targets;  // indexed by Contrast
  Tensor<float> mask;

  const Tensor<float>& target(Contrast c) const { return targets[static_cast<int>(c)]; }
};

/// Throws DataError unless every volume shares dims, lies in [-1,1] and the
/// mask is binary.
void validate_sample(const Sample& s);

// ---------------------------------------------------------------- phantoms

struct Range {
  double lo, hi;
};

struct PhantomSpec {
  Dims3 dims{32, 32, 32};
  /// Number of smooth tissue blobs (inclusive range).
  std::array<int, 2> blob_count{4, 8};
  /// Blob radius as a fraction of the smallest dim.
  Range blob_radius{0.08, 0.2};
  /// Tumour semi-axes as a fraction of the smallest dim.
  Range tumour_radius{0.12, 0.2};
  /// Accepted tumour voxel fraction; geometry is redrawn until it lands inside.
  Range tumour_fraction{0.005, 0.10};
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Noise-free building blocks of a phantom, all [D,H,W].
struct PhantomFields {
  Tensor<float> anatomy;  // in [0,1], 0 outside the head
  Tensor<float> head;     // binary
  Tensor<float> mask;     // tumour, binary
  Tensor<float> rim;      // in [0,1], peaks at the tumour boundary
};

PhantomFields phantom_fields(const PhantomSpec& spec);

/// Noise-free raw intensity of one sequence. `source` selects T2w;
/// otherwise `contrast` picks the target. Each is a strictly monotone
/// function of anatomy outside the tumour.
Tensor<float> render_sequence(const PhantomFields& f, bool source, Contrast contrast = Contrast::kT2f);

/// Fields -> raw sequences -> noise -> per-sequence normalization.
Sample generate_phantom(const PhantomSpec& spec, const std::string& subject_id = "");

// ----------------------------------------------------------- preprocessing

/// Linear-interpolation percentile (q in [0,100]) of unsorted values.
double percentile(std::span<const float> values, double q);

struct NormalizeInfo {
  double lo = 0, hi = 0;
  bool degenerate = false;
};

/// Clip to [p0.1, p99.9] then map min -> -1, max -> +1. A constant input
/// yields all -1 and a warning on std::clog.
Tensor<float> normalize_volume(const Tensor<float>& v, NormalizeInfo* info = nullptr);

/// Any nonzero label -> 1.
Tensor<float> binarize_labels(const Tensor<float>& labels);

/// Embed [D,H,W] into `target`: the depth (axial) deficit goes at the end,
/// in-plane deficits split evenly with the odd voxel trailing.
Tensor<float> pad_to_grid(const Tensor<float>& v, const Dims3& target, float pad_value);

// ------------------------------------------------------------ file format

/// MCSV1: "MCSV" | u8 version=1 | u8 ndim | ndim x u32 dims | u8 dtype (0=f32) | payload.
void write_volume(const std::string& path, const Tensor<float>& v);
Tensor<float> read_volume(const std::string& path);

// ---------------------------------------------------------------- datasets

/// Seeded shuffle, then consecutive slices of the given sizes.
std::vector<std::vector<std::string>> dataset_split(const std::vector<std::string>& ids,
                                                    const std::vector<std::size_t>& counts,
                                                    std::uint64_t seed);

/// Writes one MCSV1 file per sequence and a manifest.json into `dir`.
void write_dataset(const std::string& dir, const std::vector<Sample>& samples);
/// Reads manifest.json from `dir`; every sample is validated.
std::vector<Sample> read_dataset(const std::string& dir);

/// Stack [D,H,W] volumes into [B,1,D,H,W].
Tensor<float> stack_volumes(const std::vector<Tensor<float>>& vols);

}  // namespace mcsagan
