#include <algorithm>
#include <cmath>

#include "mcsagan/autograd.hpp"
#include "mcsagan/ops.hpp"

namespace mcsagan {
namespace {

using detail::record;

void require_5d(const Shape& s, const char* what) {
  if (s.size() != 5)
    throw ShapeError(std::string(what) + " expects [B,C,D,H,W], got " +
                     to_string(s));
}

Dims3 pooled_dims(const Shape& in, const Dims3& block) {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (block[u] < 1) throw ShapeError("avg_pool3d block size must be >= 1");
    if (block[u] > in[u + 2])
      throw ShapeError("avg_pool3d block " + std::to_string(block[u]) +
                       " exceeds spatial extent " + std::to_string(in[u + 2]));
    out[u] = in[u + 2] / block[u];
  }
  return out;
}

struct InterpTap {
  Index i0, i1;
  double w0, w1;
};

// Align-corners-false linear interpolation taps from `in` to `out` samples.
std::vector<InterpTap> interp_taps(Index in, Index out) {
  std::vector<InterpTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index j = 0; j < out; ++j) {
    double src = (static_cast<double>(j) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const double lambda = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(j)] = {i0, i1, 1.0 - lambda, lambda};
  }
  return taps;
}

struct AxisGeo {
  Index outer, inner;
};

AxisGeo axis_geo(const Shape& s, int axis) {
  AxisGeo g{1, 1};
  for (int i = 0; i < axis; ++i) g.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    g.inner *= s[i];
  return g;
}

}  // namespace

template <typename S>
Tensor<S> avg_pool3d(const Tensor<S>& a, Index s) {
  if (s < 1) throw ShapeError("avg_pool3d stride must be >= 1");
  return avg_pool3d(a, Dims3{s, s, s});
}

template <typename S>
Tensor<S> avg_pool3d(const Tensor<S>& a, const Dims3& block) {
  require_5d(a.shape(), "avg_pool3d");
  if (block == Dims3{1, 1, 1}) return a;
  const Shape& in = a.shape();
  const Dims3 od = pooled_dims(in, block);
  Tensor<S> out = Tensor<S>::zeros({in[0], in[1], od[0], od[1], od[2]});
  const Index bc = in[0] * in[1];
  const Index ivol = in[2] * in[3] * in[4];
  const Index ovol = od[0] * od[1] * od[2];
  const S inv = S(1) / static_cast<S>(block[0] * block[1] * block[2]);
  for (Index c = 0; c < bc; ++c) {
    const S* x = a.raw() + c * ivol;
    S* y = out.raw() + c * ovol;
    for (Index d = 0; d < od[0] * block[0]; ++d)
      for (Index h = 0; h < od[1] * block[1]; ++h) {
        const S* row = x + (d * in[3] + h) * in[4];
        S* orow = y + ((d / block[0]) * od[1] + h / block[1]) * od[2];
        for (Index w = 0; w < od[2] * block[2]; ++w) orow[w / block[2]] += row[w];
      }
    for (Index i = 0; i < ovol; ++i) y[i] *= inv;
  }
  const Shape sa = a.shape();
  return record(out, "avg_pool3d", {a}, [sa, block](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{avg_pool3d_adjoint(g, sa, block)};
  });
}

template <typename S>
Tensor<S> avg_pool3d_adjoint(const Tensor<S>& g, const Shape& input_shape,
                             const Dims3& block) {
  require_5d(input_shape, "avg_pool3d_adjoint");
  const Dims3 od = pooled_dims(input_shape, block);
  if (g.shape() != Shape{input_shape[0], input_shape[1], od[0], od[1], od[2]})
    throw ShapeError("avg_pool3d_adjoint: gradient shape " + to_string(g.shape()));
  Tensor<S> out = Tensor<S>::zeros(input_shape);
  const Shape& in = input_shape;
  const Index bc = in[0] * in[1];
  const Index ivol = in[2] * in[3] * in[4];
  const Index ovol = od[0] * od[1] * od[2];
  const S inv = S(1) / static_cast<S>(block[0] * block[1] * block[2]);
  for (Index c = 0; c < bc; ++c) {
    S* x = out.raw() + c * ivol;
    const S* y = g.raw() + c * ovol;
    for (Index d = 0; d < od[0] * block[0]; ++d)
      for (Index h = 0; h < od[1] * block[1]; ++h) {
        S* row = x + (d * in[3] + h) * in[4];
        const S* orow = y + ((d / block[0]) * od[1] + h / block[1]) * od[2];
        for (Index w = 0; w < od[2] * block[2]; ++w) row[w] = orow[w / block[2]] * inv;
      }
  }
  return record(out, "avg_pool3d_adjoint", {g}, [block](const Tensor<S>& gg) {
    return std::vector<Tensor<S>>{avg_pool3d(gg, block)};
  });
}

template <typename S>
Tensor<S> resample_axis(const Tensor<S>& a, int axis, Index length) {
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("resample_axis: bad axis");
  const Index in_len = a.dim(axis);
  if (length < 1 || in_len < 1) throw ShapeError("resample_axis: empty axis");
  if (length == in_len) return a;
  const auto taps = interp_taps(in_len, length);
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  Tensor<S> out = Tensor<S>::empty(shape);
  const AxisGeo geo = axis_geo(a.shape(), axis);
  for (Index o = 0; o < geo.outer; ++o) {
    const S* x = a.raw() + o * in_len * geo.inner;
    S* y = out.raw() + o * length * geo.inner;
    for (Index j = 0; j < length; ++j) {
      const InterpTap& t = taps[static_cast<std::size_t>(j)];
      const S w0 = static_cast<S>(t.w0), w1 = static_cast<S>(t.w1);
      const S* x0 = x + t.i0 * geo.inner;
      const S* x1 = x + t.i1 * geo.inner;
      S* yj = y + j * geo.inner;
      for (Index i = 0; i < geo.inner; ++i) yj[i] = w0 * x0[i] + w1 * x1[i];
    }
  }
  return record(out, "resample_axis", {a}, [axis, in_len](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{resample_axis_adjoint(g, axis, in_len)};
  });
}

template <typename S>
Tensor<S> resample_axis_adjoint(const Tensor<S>& g, int axis, Index input_length) {
  const Index out_len = g.dim(axis);
  if (out_len == input_length) return g;
  const auto taps = interp_taps(input_length, out_len);
  Shape shape = g.shape();
  shape[static_cast<std::size_t>(axis)] = input_length;
  Tensor<S> out = Tensor<S>::zeros(shape);
  const AxisGeo geo = axis_geo(g.shape(), axis);
  for (Index o = 0; o < geo.outer; ++o) {
    const S* y = g.raw() + o * out_len * geo.inner;
    S* x = out.raw() + o * input_length * geo.inner;
    for (Index j = 0; j < out_len; ++j) {
      const InterpTap& t = taps[static_cast<std::size_t>(j)];
      const S w0 = static_cast<S>(t.w0), w1 = static_cast<S>(t.w1);
      S* x0 = x + t.i0 * geo.inner;
      S* x1 = x + t.i1 * geo.inner;
      const S* yj = y + j * geo.inner;
      for (Index i = 0; i < geo.inner; ++i) {
        x0[i] += w0 * yj[i];
        x1[i] += w1 * yj[i];
      }
    }
  }
  return record(out, "resample_axis_adjoint", {g}, [axis, out_len](const Tensor<S>& gg) {
    return std::vector<Tensor<S>>{resample_axis(gg, axis, out_len)};
  });
}

template <typename S>
Tensor<S> upsample_trilinear(const Tensor<S>& a, const Dims3& target) {
  require_5d(a.shape(), "upsample_trilinear");
  for (int i = 0; i < 3; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (a.dim(i + 2) < 1) throw ShapeError("upsample_trilinear: empty source");
    if (target[u] < a.dim(i + 2))
      throw ShapeError("upsample_trilinear: target " + std::to_string(target[u]) +
                       " smaller than source " + std::to_string(a.dim(i + 2)));
  }
  Tensor<S> out = a;
  for (int i = 0; i < 3; ++i)
    out = resample_axis(out, i + 2, target[static_cast<std::size_t>(i)]);
  return out;
}

#define MCSAGAN_INSTANTIATE(S)                                                 \
  template Tensor<S> avg_pool3d(const Tensor<S>&, Index);                      \
  template Tensor<S> avg_pool3d(const Tensor<S>&, const Dims3&);               \
  template Tensor<S> avg_pool3d_adjoint(const Tensor<S>&, const Shape&,        \
                                        const Dims3&);                         \
  template Tensor<S> resample_axis(const Tensor<S>&, int, Index);              \
  template Tensor<S> resample_axis_adjoint(const Tensor<S>&, int, Index);      \
  template Tensor<S> upsample_trilinear(const Tensor<S>&, const Dims3&);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
