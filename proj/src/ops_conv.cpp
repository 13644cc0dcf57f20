#include <Eigen/Dense>
#include <algorithm>
#include <cstring>

#include "mcsagan/autograd.hpp"
#include "mcsagan/ops.hpp"
#include "mcsagan/parallel.hpp"

namespace mcsagan {
namespace {

using detail::record;

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Column-major views of the same row-major buffers: a row-major (R x P) im2col
// buffer is a column-major (P x R) matrix. Putting the voxel dimension first
// keeps Eigen's GEMM micro-kernel full when channel counts are small.
template <typename S>
using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename S>
using ColStridedMap = Eigen::Map<ColMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename S>
using ConstColStridedMap = Eigen::Map<const ColMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename S>
using StridedMap =
    Eigen::Map<RowMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap =
    Eigen::Map<const RowMat<S>, Eigen::Unaligned, Eigen::OuterStride<>>;

// Target number of output voxels per im2col chunk.
constexpr Index kChunkColumns = 2048;

struct ConvGeometry {
  Index batch, in_ch, out_ch, k, stride, pad;
  Dims3 in, out;
  Index in_plane() const { return in[1] * in[2]; }
  Index in_vol() const { return in[0] * in[1] * in[2]; }
  Index out_plane() const { return out[1] * out[2]; }
  Index out_vol() const { return out[0] * out[1] * out[2]; }
  Index rows() const { return in_ch * k * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  Index planes_per_chunk() const {
    return std::max<Index>(1, kChunkColumns / std::max<Index>(1, out_plane()));
  }
};

ConvGeometry make_geometry(const Shape& input, const Shape& weight,
                           Index stride, Index pad) {
  if (input.size() != 5)
    throw ShapeError("conv3d input must be [B,C,D,H,W], got " + to_string(input));
  if (weight.size() != 5 || weight[2] != weight[3] || weight[3] != weight[4])
    throw ShapeError("conv3d weight must be [Co,Ci,k,k,k], got " +
                     to_string(weight));
  if (weight[1] != input[1])
    throw ShapeError("conv3d channel mismatch: input " + to_string(input) +
                     ", weight " + to_string(weight));
  if (stride < 1 || pad < 0 || weight[2] < 1)
    throw ShapeError("conv3d requires stride >= 1, padding >= 0, kernel >= 1");
  ConvGeometry g;
  g.batch = input[0];
  g.in_ch = input[1];
  g.out_ch = weight[0];
  g.k = weight[2];
  g.stride = stride;
  g.pad = pad;
  g.in = {input[2], input[3], input[4]};
  g.out = conv_output_dims(g.in, g.k, stride, pad);
  return g;
}

// Stride-1 convolution whose output plane matches the input plane: each
// (tap, output plane) row is one shifted block copy of the input plane,
// followed by zeroing the columns that fell outside the image.
template <typename S>
void im2col_same(const ConvGeometry& g, const S* x, Index od0, Index nplanes,
                 S* cols) {
  const Index P = nplanes * g.out_plane();
  const Index K = g.k, H = g.in[1], W = g.in[2], plane = g.in_plane();
  for (Index ci = 0; ci < g.in_ch; ++ci) {
    const S* xc = x + ci * g.in_vol();
    for (Index kd = 0; kd < K; ++kd)
      for (Index kh = 0; kh < K; ++kh)
        for (Index kw = 0; kw < K; ++kw) {
          S* row = cols + (((ci * K + kd) * K + kh) * K + kw) * P;
          const Index dw = kw - g.pad;
          const Index ow_lo = std::max<Index>(0, -dw), ow_hi = std::min(W, W - dw);
          const Index oh_lo = std::max<Index>(0, g.pad - kh),
                      oh_hi = std::min(H, H + g.pad - kh);
          for (Index pd = 0; pd < nplanes; ++pd) {
            S* dst = row + pd * plane;
            const Index id = od0 + pd - g.pad + kd;
            if (id < 0 || id >= g.in[0] || oh_lo >= oh_hi) {
              std::fill(dst, dst + plane, S(0));
              continue;
            }
            std::fill(dst, dst + oh_lo * W, S(0));
            std::fill(dst + oh_hi * W, dst + plane, S(0));
            // Flat copy of rows [oh_lo, oh_hi) shifted by dw; the few
            // elements that wrap across row ends are zeroed below.
            Index begin = oh_lo * W, end = oh_hi * W;
            const Index src0 = id * plane + (kh - g.pad) * W + dw;
            if (src0 + begin < 0) begin = -src0;
            if (src0 + end > g.in_vol()) end = g.in_vol() - src0;
            if (end > begin)
              std::memcpy(dst + begin, xc + src0 + begin,
                          sizeof(S) * static_cast<std::size_t>(end - begin));
            for (Index oh = oh_lo; oh < oh_hi; ++oh) {
              S* r = dst + oh * W;
              for (Index ow = 0; ow < ow_lo; ++ow) r[ow] = S(0);
              for (Index ow = ow_hi; ow < W; ++ow) r[ow] = S(0);
            }
          }
        }
  }
}

// Fills a (rows x P) row-major column buffer for output planes
// [od0, od0 + nplanes) of sample `x` (pointer to [Ci,D,H,W]).
template <typename S>
void im2col(const ConvGeometry& g, const S* x, Index od0, Index nplanes,
            S* cols) {
  if (g.stride == 1 && g.out[1] == g.in[1] && g.out[2] == g.in[2]) {
    im2col_same(g, x, od0, nplanes, cols);
    return;
  }
  const Index P = nplanes * g.out_plane();
  const Index K = g.k;
  for (Index ci = 0; ci < g.in_ch; ++ci) {
    const S* xc = x + ci * g.in_vol();
    for (Index kd = 0; kd < K; ++kd)
      for (Index kh = 0; kh < K; ++kh)
        for (Index kw = 0; kw < K; ++kw) {
          const Index r = ((ci * K + kd) * K + kh) * K + kw;
          S* row = cols + r * P;
          // Valid ow range: 0 <= ow*s - p + kw < W.
          Index ow_lo = 0;
          while (ow_lo < g.out[2] && ow_lo * g.stride - g.pad + kw < 0) ++ow_lo;
          Index ow_hi = g.out[2];
          while (ow_hi > ow_lo &&
                 (ow_hi - 1) * g.stride - g.pad + kw >= g.in[2])
            --ow_hi;
          for (Index pd = 0; pd < nplanes; ++pd) {
            const Index id = (od0 + pd) * g.stride - g.pad + kd;
            for (Index oh = 0; oh < g.out[1]; ++oh) {
              S* dst = row + (pd * g.out[1] + oh) * g.out[2];
              const Index ih = oh * g.stride - g.pad + kh;
              if (id < 0 || id >= g.in[0] || ih < 0 || ih >= g.in[1]) {
                std::fill(dst, dst + g.out[2], S(0));
                continue;
              }
              const S* src = xc + (id * g.in[1] + ih) * g.in[2];
              std::fill(dst, dst + ow_lo, S(0));
              if (g.stride == 1) {
                const Index off = kw - g.pad;
                std::memcpy(dst + ow_lo, src + ow_lo + off,
                            sizeof(S) * static_cast<std::size_t>(ow_hi - ow_lo));
              } else {
                for (Index ow = ow_lo; ow < ow_hi; ++ow)
                  dst[ow] = src[ow * g.stride - g.pad + kw];
              }
              std::fill(dst + ow_hi, dst + g.out[2], S(0));
            }
          }
        }
  }
}

// Scatter-adds a (rows x P) column buffer back into sample gradient `gx`.
template <typename S>
void col2im_add(const ConvGeometry& g, const S* cols, Index od0, Index nplanes,
                S* gx) {
  const Index P = nplanes * g.out_plane();
  const Index K = g.k;
  for (Index ci = 0; ci < g.in_ch; ++ci) {
    S* xc = gx + ci * g.in_vol();
    for (Index kd = 0; kd < K; ++kd)
      for (Index kh = 0; kh < K; ++kh)
        for (Index kw = 0; kw < K; ++kw) {
          const Index r = ((ci * K + kd) * K + kh) * K + kw;
          const S* row = cols + r * P;
          Index ow_lo = 0;
          while (ow_lo < g.out[2] && ow_lo * g.stride - g.pad + kw < 0) ++ow_lo;
          Index ow_hi = g.out[2];
          while (ow_hi > ow_lo &&
                 (ow_hi - 1) * g.stride - g.pad + kw >= g.in[2])
            --ow_hi;
          for (Index pd = 0; pd < nplanes; ++pd) {
            const Index id = (od0 + pd) * g.stride - g.pad + kd;
            if (id < 0 || id >= g.in[0]) continue;
            for (Index oh = 0; oh < g.out[1]; ++oh) {
              const Index ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in[1]) continue;
              const S* src = row + (pd * g.out[1] + oh) * g.out[2];
              S* dst = xc + (id * g.in[1] + ih) * g.in[2];
              if (g.stride == 1) {
                S* d = dst + kw - g.pad;
                for (Index ow = ow_lo; ow < ow_hi; ++ow) d[ow] += src[ow];
              } else {
                for (Index ow = ow_lo; ow < ow_hi; ++ow)
                  dst[ow * g.stride - g.pad + kw] += src[ow];
              }
            }
          }
        }
  }
}

template <typename S>
Tensor<S> conv_forward_kernel(const Tensor<S>& input, const Tensor<S>& weight,
                              const ConvGeometry& g) {
  Tensor<S> out = Tensor<S>::empty({g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]});
  Eigen::Map<const RowMat<S>> wmat(weight.raw(), g.out_ch, g.rows());
  Eigen::Map<const ColMat<S>> wt(weight.raw(), g.rows(), g.out_ch);
  parallel_for(g.batch, [&](Index b) {
    const S* x = input.raw() + b * g.in_ch * g.in_vol();
    S* y = out.raw() + b * g.out_ch * g.out_vol();
    if (g.pointwise()) {
      Eigen::Map<const RowMat<S>> xm(x, g.in_ch, g.in_vol());
      Eigen::Map<RowMat<S>> ym(y, g.out_ch, g.out_vol());
      ym.noalias() = wmat * xm;
      return;
    }
    const Index step = g.planes_per_chunk();
    std::vector<S> cols(static_cast<std::size_t>(g.rows() * step * g.out_plane()));
    for (Index od0 = 0; od0 < g.out[0]; od0 += step) {
      const Index np = std::min(step, g.out[0] - od0);
      const Index P = np * g.out_plane();
      im2col(g, x, od0, np, cols.data());
      Eigen::Map<const ColMat<S>> ct(cols.data(), P, g.rows());
      ColStridedMap<S> yt(y + od0 * g.out_plane(), P, g.out_ch,
                          Eigen::OuterStride<>(g.out_vol()));
      yt.noalias() = ct * wt;
    }
  });
  return out;
}

template <typename S>
Tensor<S> conv_grad_input_kernel(const Tensor<S>& grad_out,
                                 const Tensor<S>& weight, const ConvGeometry& g) {
  Tensor<S> gx = Tensor<S>::zeros({g.batch, g.in_ch, g.in[0], g.in[1], g.in[2]});
  Eigen::Map<const RowMat<S>> wmat(weight.raw(), g.out_ch, g.rows());
  Eigen::Map<const ColMat<S>> wt(weight.raw(), g.rows(), g.out_ch);
  parallel_for(g.batch, [&](Index b) {
    const S* gy = grad_out.raw() + b * g.out_ch * g.out_vol();
    S* dx = gx.raw() + b * g.in_ch * g.in_vol();
    if (g.pointwise()) {
      Eigen::Map<const RowMat<S>> gm(gy, g.out_ch, g.out_vol());
      Eigen::Map<RowMat<S>> dm(dx, g.in_ch, g.in_vol());
      dm.noalias() = wmat.transpose() * gm;
      return;
    }
    const Index step = g.planes_per_chunk();
    std::vector<S> cols(static_cast<std::size_t>(g.rows() * step * g.out_plane()));
    for (Index od0 = 0; od0 < g.out[0]; od0 += step) {
      const Index np = std::min(step, g.out[0] - od0);
      const Index P = np * g.out_plane();
      ConstColStridedMap<S> gt(gy + od0 * g.out_plane(), P, g.out_ch,
                               Eigen::OuterStride<>(g.out_vol()));
      Eigen::Map<ColMat<S>> ct(cols.data(), P, g.rows());
      ct.noalias() = gt * wt.transpose();
      col2im_add(g, cols.data(), od0, np, dx);
    }
  });
  return gx;
}

template <typename S>
Tensor<S> conv_grad_weight_kernel(const Tensor<S>& input,
                                  const Tensor<S>& grad_out,
                                  const ConvGeometry& g) {
  std::vector<RowMat<S>> partial(static_cast<std::size_t>(g.batch));
  parallel_for(g.batch, [&](Index b) {
    RowMat<S>& acc = partial[static_cast<std::size_t>(b)];
    acc = RowMat<S>::Zero(g.out_ch, g.rows());
    // acc is row-major (Co x R); as column-major it is its transpose (R x Co).
    Eigen::Map<ColMat<S>> acc_t(acc.data(), g.rows(), g.out_ch);
    const S* x = input.raw() + b * g.in_ch * g.in_vol();
    const S* gy = grad_out.raw() + b * g.out_ch * g.out_vol();
    if (g.pointwise()) {
      Eigen::Map<const RowMat<S>> xm(x, g.in_ch, g.in_vol());
      Eigen::Map<const RowMat<S>> gm(gy, g.out_ch, g.out_vol());
      acc.noalias() += gm * xm.transpose();
      return;
    }
    const Index step = g.planes_per_chunk();
    std::vector<S> cols(static_cast<std::size_t>(g.rows() * step * g.out_plane()));
    for (Index od0 = 0; od0 < g.out[0]; od0 += step) {
      const Index np = std::min(step, g.out[0] - od0);
      const Index P = np * g.out_plane();
      im2col(g, x, od0, np, cols.data());
      Eigen::Map<const ColMat<S>> ct(cols.data(), P, g.rows());
      ConstColStridedMap<S> gt(gy + od0 * g.out_plane(), P, g.out_ch,
                               Eigen::OuterStride<>(g.out_vol()));
      acc_t.noalias() += ct.transpose() * gt;
    }
  });
  Tensor<S> gw = Tensor<S>::zeros({g.out_ch, g.in_ch, g.k, g.k, g.k});
  Eigen::Map<RowMat<S>> gwm(gw.raw(), g.out_ch, g.rows());
  for (const auto& p : partial) gwm += p;
  return gw;
}

}  // namespace

Dims3 conv_output_dims(const Dims3& in, Index kernel, Index stride,
                       Index padding) {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    const Index span = in[static_cast<std::size_t>(i)] + 2 * padding - kernel;
    if (span < 0)
      throw ShapeError("conv3d produces a non-positive output dimension (input " +
                       std::to_string(in[static_cast<std::size_t>(i)]) +
                       ", kernel " + std::to_string(kernel) + ", padding " +
                       std::to_string(padding) + ")");
    out[static_cast<std::size_t>(i)] = span / stride + 1;
  }
  return out;
}

template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight,
                 const std::optional<Tensor<S>>& bias, Index stride,
                 Index padding) {
  const ConvGeometry g = make_geometry(input.shape(), weight.shape(), stride, padding);
  Tensor<S> out = conv_forward_kernel(input, weight, g);
  check_finite(out, "conv3d");
  out = record(out, "conv3d", {input, weight},
               [input, weight, stride, padding](const Tensor<S>& gy) {
                 Tensor<S> gx, gw;
                 if (input.requires_grad())
                   gx = conv3d_grad_input(gy, weight, input.shape(), stride, padding);
                 if (weight.requires_grad())
                   gw = conv3d_grad_weight(input, gy, weight.shape(), stride, padding);
                 return std::vector<Tensor<S>>{gx, gw};
               });
  if (bias) {
    if (bias->numel() != g.out_ch)
      throw ShapeError("conv3d bias has " + std::to_string(bias->numel()) +
                       " entries for " + std::to_string(g.out_ch) + " channels");
    out = add(out, reshape(*bias, {1, g.out_ch, 1, 1, 1}));
  }
  return out;
}

template <typename S>
Tensor<S> conv3d_grad_input(const Tensor<S>& grad_out, const Tensor<S>& weight,
                            const Shape& input_shape, Index stride,
                            Index padding) {
  const ConvGeometry g = make_geometry(input_shape, weight.shape(), stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]})
    throw ShapeError("conv3d_grad_input: gradient shape " +
                     to_string(grad_out.shape()));
  Tensor<S> gx = conv_grad_input_kernel(grad_out, weight, g);
  check_finite(gx, "conv3d_grad_input");
  return record(gx, "conv3d_grad_input", {grad_out, weight},
                [grad_out, weight, stride, padding](const Tensor<S>& gg) {
                  Tensor<S> d_gout, d_w;
                  if (grad_out.requires_grad())
                    d_gout = conv3d<S>(gg, weight, std::nullopt, stride, padding);
                  if (weight.requires_grad())
                    d_w = conv3d_grad_weight(gg, grad_out, weight.shape(), stride,
                                             padding);
                  return std::vector<Tensor<S>>{d_gout, d_w};
                });
}

template <typename S>
Tensor<S> conv3d_grad_weight(const Tensor<S>& input, const Tensor<S>& grad_out,
                             const Shape& weight_shape, Index stride,
                             Index padding) {
  const ConvGeometry g = make_geometry(input.shape(), weight_shape, stride, padding);
  Tensor<S> gw = conv_grad_weight_kernel(input, grad_out, g);
  check_finite(gw, "conv3d_grad_weight");
  return record(gw, "conv3d_grad_weight", {input, grad_out},
                [input, grad_out, stride, padding](const Tensor<S>& gg) {
                  Tensor<S> d_in, d_gout;
                  if (input.requires_grad())
                    d_in = conv3d_grad_input(grad_out, gg, input.shape(), stride,
                                             padding);
                  if (grad_out.requires_grad())
                    d_gout = conv3d<S>(input, gg, std::nullopt, stride, padding);
                  return std::vector<Tensor<S>>{d_in, d_gout};
                });
}

#define MCSAGAN_INSTANTIATE(S)                                                 \
  template Tensor<S> conv3d(const Tensor<S>&, const Tensor<S>&,                \
                            const std::optional<Tensor<S>>&, Index, Index);    \
  template Tensor<S> conv3d_grad_input(const Tensor<S>&, const Tensor<S>&,     \
                                       const Shape&, Index, Index);            \
  template Tensor<S> conv3d_grad_weight(const Tensor<S>&, const Tensor<S>&,    \
                                        const Shape&, Index, Index);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
