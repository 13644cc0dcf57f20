#include "mcsagan/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mcsagan {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'C', 'S', 'C'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v{};
    bytes(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw std::runtime_error(path_ + ": truncated archive");
  }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

const Tensor<float>* Archive::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

void write_archive(const std::string& path, const std::string& header,
                   const std::vector<NamedTensor<float>>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const Shape& s = e.tensor.shape();
    put<std::uint8_t>(os, static_cast<std::uint8_t>(s.size()));
    for (Index d : s) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.tensor.raw()),
             static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write to " + path + " failed");
}

Archive read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error(path + ": bad magic");
  Archive a;
  a.header.resize(r.get<std::uint32_t>());
  r.bytes(a.header.data(), a.header.size());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> e;
    e.name.resize(r.get<std::uint32_t>());
    r.bytes(e.name.data(), e.name.size());
    Shape shape(r.get<std::uint8_t>());
    for (Index& d : shape) d = r.get<std::uint32_t>();
    e.tensor = Tensor<float>::zeros(shape);
    r.bytes(reinterpret_cast<char*>(e.tensor.raw()),
            static_cast<std::size_t>(e.tensor.numel()) * sizeof(float));
    a.entries.push_back(std::move(e));
  }
  return a;
}

template <typename S>
std::vector<NamedTensor<float>> snapshot(const ParamRegistry<S>& reg) {
  std::vector<NamedTensor<float>> out;
  for (const auto* list : {&reg.params, &reg.buffers})
    for (const auto& p : *list) out.push_back({p.name, cast<float>(p.tensor)});
  return out;
}

template <typename S>
void restore(ParamRegistry<S>& reg, const Archive& archive) {
  for (auto* list : {&reg.params, &reg.buffers})
    for (auto& p : *list) {
      const Tensor<float>* src = archive.find(p.name);
      if (!src) throw std::runtime_error("checkpoint lacks tensor " + p.name);
      if (src->shape() != p.tensor.shape())
        throw ShapeError("checkpoint tensor " + p.name + " has shape " +
                         to_string(src->shape()) + ", model expects " +
                         to_string(p.tensor.shape()));
      std::transform(src->data().begin(), src->data().end(), p.tensor.data().begin(),
                     [](float v) { return static_cast<S>(v); });
    }
}

template std::vector<NamedTensor<float>> snapshot(const ParamRegistry<float>&);
template std::vector<NamedTensor<float>> snapshot(const ParamRegistry<double>&);
template void restore(ParamRegistry<float>&, const Archive&);
template void restore(ParamRegistry<double>&, const Archive&);

}  // namespace mcsagan
