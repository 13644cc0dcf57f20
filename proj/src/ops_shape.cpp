#include <Eigen/Dense>
#include <algorithm>
#include <cstring>

#include "mcsagan/autograd.hpp"
#include "mcsagan/ops.hpp"

namespace mcsagan {
namespace {

using detail::record;

template <typename S>
Tensor<S> view(const Tensor<S>& a, Shape shape) {
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->storage = a.impl()->storage;
  return Tensor<S>(std::move(impl));
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  return axis;
}

// Splits a shape around `axis` into (outer, axis extent, inner).
std::array<Index, 3> around(const Shape& shape, int axis) {
  std::array<Index, 3> r{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r[0] *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    r[2] *= shape[i];
  return r;
}

}  // namespace

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " +
                     to_string(shape));
  if (shape == a.shape()) return a;
  Tensor<S> out = view(a, std::move(shape));
  const Shape sa = a.shape();
  return record(out, "reshape", {a}, [sa](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{reshape(g, sa)};
  });
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  if (a.ndim() != 3)
    throw ShapeError("transpose_last2 expects rank 3, got " +
                     to_string(a.shape()));
  const Index b = a.dim(0), n = a.dim(1), m = a.dim(2);
  Tensor<S> out = Tensor<S>::empty({b, m, n});
  using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Index i = 0; i < b; ++i) {
    Eigen::Map<const RowMat> src(a.raw() + i * n * m, n, m);
    Eigen::Map<RowMat> dst(out.raw() + i * n * m, m, n);
    dst = src.transpose();
  }
  return record(out, "transpose", {a}, [](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{transpose_last2(g)};
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  axis = normalize_axis(axis, parts[0].ndim());
  Shape shape = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size())
      throw ShapeError("concat rank mismatch");
    s[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (s != shape)
      throw ShapeError("concat shape mismatch: " + to_string(p.shape()) +
                       " vs " + to_string(parts[0].shape()));
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  Tensor<S> out = Tensor<S>::empty(shape);
  const auto geo = around(shape, axis);
  Index offset = 0;
  std::vector<Index> starts;
  for (const auto& p : parts) {
    starts.push_back(offset);
    const Index len = p.dim(axis);
    const Index block = len * geo[2];
    for (Index o = 0; o < geo[0]; ++o)
      std::memcpy(out.raw() + (o * total + offset) * geo[2],
                  p.raw() + o * block, sizeof(S) * static_cast<std::size_t>(block));
    offset += len;
  }
  std::vector<Index> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return record(out, "concat", parts,
                [axis, starts, lens](const Tensor<S>& g) {
                  std::vector<Tensor<S>> grads;
                  for (std::size_t i = 0; i < starts.size(); ++i)
                    grads.push_back(slice(g, axis, starts[i], lens[i]));
                  return grads;
                });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, Index start, Index length) {
  axis = normalize_axis(axis, a.ndim());
  const Index extent = a.dim(axis);
  if (start < 0 || length < 0 || start + length > extent)
    throw ShapeError("slice [" + std::to_string(start) + ", +" +
                     std::to_string(length) + ") out of range on axis of " +
                     std::to_string(extent));
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  Tensor<S> out = Tensor<S>::empty(shape);
  const auto geo = around(a.shape(), axis);
  for (Index o = 0; o < geo[0]; ++o)
    std::memcpy(out.raw() + o * length * geo[2],
                a.raw() + (o * extent + start) * geo[2],
                sizeof(S) * static_cast<std::size_t>(length * geo[2]));
  const Shape sa = a.shape();
  return record(out, "slice", {a}, [sa, axis, start](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{embed(g, sa, axis, start)};
  });
}

template <typename S>
Tensor<S> embed(const Tensor<S>& a, const Shape& shape, int axis, Index start) {
  axis = normalize_axis(axis, static_cast<int>(shape.size()));
  const Index length = a.dim(axis);
  Tensor<S> out = Tensor<S>::zeros(shape);
  const auto geo = around(shape, axis);
  const Index extent = geo[1];
  if (start < 0 || start + length > extent)
    throw ShapeError("embed out of range");
  for (Index o = 0; o < geo[0]; ++o)
    std::memcpy(out.raw() + (o * extent + start) * geo[2],
                a.raw() + o * length * geo[2],
                sizeof(S) * static_cast<std::size_t>(length * geo[2]));
  return record(out, "embed", {a}, [axis, start, length](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{slice(g, axis, start, length)};
  });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw ShapeError("matmul " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const Index batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  Tensor<S> out = Tensor<S>::empty({batch, n, m});
  using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Index i = 0; i < batch; ++i) {
    Eigen::Map<const RowMat> ma(a.raw() + i * n * k, n, k);
    Eigen::Map<const RowMat> mb(b.raw() + i * k * m, k, m);
    Eigen::Map<RowMat> mo(out.raw() + i * n * m, n, m);
    mo.noalias() = ma * mb;
  }
  check_finite(out, "matmul");
  return record(out, "matmul", {a, b}, [a, b](const Tensor<S>& g) {
    Tensor<S> ga, gb;
    if (a.requires_grad()) ga = matmul(g, transpose_last2(b));
    if (b.requires_grad()) gb = matmul(transpose_last2(a), g);
    return std::vector<Tensor<S>>{ga, gb};
  });
}

template <typename S>
Tensor<S> normalize(const Tensor<S>& x, NormMode mode, int groups, S eps) {
  if (x.ndim() < 3)
    throw ShapeError("normalize expects [B,C,...], got " + to_string(x.shape()));
  const Index batch = x.dim(0), channels = x.dim(1);
  const Index spatial = x.numel() / std::max<Index>(1, batch * channels);
  if (spatial == 0 || x.numel() == 0)
    throw ShapeError("normalize over zero spatial extent");
  Index slabs = channels;
  if (mode == NormMode::kGroup) {
    if (groups <= 0 || channels % groups != 0)
      throw ShapeError("group norm: " + std::to_string(channels) +
                       " channels not divisible by " + std::to_string(groups) +
                       " groups");
    slabs = groups;
  }
  const Tensor<S> flat = reshape(x, {batch, slabs, x.numel() / (batch * slabs)});
  const Tensor<S> centered = sub(flat, mean_axis(flat, 2));
  const Tensor<S> var = mean_axis(square(centered), 2);
  const Tensor<S> y = mul(centered, pow(add_scalar(var, eps), S(-0.5)));
  return reshape(y, x.shape());
}

template <typename S>
Dims3 spatial_dims(const Tensor<S>& x) {
  if (x.ndim() != 5)
    throw ShapeError("expected [B,C,D,H,W], got " + to_string(x.shape()));
  return {x.dim(2), x.dim(3), x.dim(4)};
}

#define MCSAGAN_INSTANTIATE(S)                                               \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                       \
  template Tensor<S> transpose_last2(const Tensor<S>&);                      \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);             \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);             \
  template Tensor<S> embed(const Tensor<S>&, const Shape&, int, Index);      \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> normalize(const Tensor<S>&, NormMode, int, S);          \
  template Dims3 spatial_dims(const Tensor<S>&);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
