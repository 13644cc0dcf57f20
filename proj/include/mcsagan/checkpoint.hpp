#pragma once

#include <string>
#include <vector>

#include "mcsagan/layers.hpp"
#include "mcsagan/tensor.hpp"

// Binary tensor archive used for checkpoints and external weights:
//   "MCSC" | u32 header_len | header JSON | u32 count |
//   count x ( u32 name_len | name | u8 ndim | ndim x u32 dim | f32 payload )
// All integers and floats little-endian, payloads row-major.

namespace mcsagan {

struct Archive {
  std::string header;  // JSON text
  std::vector<NamedTensor<float>> entries;

  const Tensor<float>* find(const std::string& name) const;
};

void write_archive(const std::string& path, const std::string& header,
                   const std::vector<NamedTensor<float>>& entries);
/// Throws std::runtime_error on bad magic or truncation.
Archive read_archive(const std::string& path);

/// Parameters then buffers, cast to f32, names prefixed.
template <typename S>
std::vector<NamedTensor<float>> snapshot(const ParamRegistry<S>& reg);

/// Copy archived values into the registry's live tensors by name. Every
/// registered tensor must be present with a matching shape.
template <typename S>
void restore(ParamRegistry<S>& reg, const Archive& archive);

}  // namespace mcsagan
