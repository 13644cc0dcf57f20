#include <algorithm>
#include <cmath>
#include <limits>

#include "mcsagan/autograd.hpp"
#include "mcsagan/ops.hpp"

namespace mcsagan {
namespace {

using detail::record;

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Index da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const Index db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Element strides of `shape` viewed as broadcast into `out` (0 where the
// operand is broadcast).
std::vector<Index> broadcast_strides(const Shape& shape, const Shape& out) {
  const std::size_t n = out.size();
  if (shape.size() > n)
    throw ShapeError("cannot broadcast " + to_string(shape) + " to " +
                     to_string(out));
  std::vector<Index> strides(n, 0);
  Index stride = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    const std::size_t src = shape.size() - 1 - k;
    const std::size_t dst = n - 1 - k;
    if (shape[src] == out[dst]) {
      strides[dst] = shape[src] == 1 ? 0 : stride;
    } else if (shape[src] == 1) {
      strides[dst] = 0;
    } else {
      throw ShapeError("cannot broadcast " + to_string(shape) + " to " +
                       to_string(out));
    }
    stride *= shape[src];
  }
  return strides;
}

// Loop nest over `extent`, carrying up to three strided offsets. Adjacent
// dimensions that are contiguous for every operand are merged so the inner
// loop runs as long as possible.
struct LoopPlan {
  std::vector<Index> extent;
  std::vector<std::array<Index, 3>> strides;
};

LoopPlan make_plan(const Shape& out, const std::vector<Index>& s0,
                   const std::vector<Index>& s1, const std::vector<Index>& s2) {
  LoopPlan plan;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == 1) continue;
    std::array<Index, 3> st{s0[i], s1[i], s2[i]};
    if (!plan.extent.empty()) {
      auto& prev = plan.strides.back();
      const Index e = out[i];
      if (prev[0] == st[0] * e && prev[1] == st[1] * e &&
          prev[2] == st[2] * e) {
        plan.extent.back() *= e;
        prev = st;
        continue;
      }
    }
    plan.extent.push_back(out[i]);
    plan.strides.push_back(st);
  }
  if (plan.extent.empty()) {
    plan.extent.push_back(1);
    plan.strides.push_back({0, 0, 0});
  }
  return plan;
}

template <typename F>
void run_plan(const LoopPlan& plan, F&& inner) {
  const int nd = static_cast<int>(plan.extent.size());
  const Index len = plan.extent.back();
  const auto& is = plan.strides.back();
  std::vector<Index> counter(static_cast<std::size_t>(nd), 0);
  std::array<Index, 3> off{0, 0, 0};
  while (true) {
    inner(len, off, is);
    int d = nd - 2;
    while (d >= 0) {
      const auto du = static_cast<std::size_t>(d);
      ++counter[du];
      for (int k = 0; k < 3; ++k) off[k] += plan.strides[du][k];
      if (counter[du] < plan.extent[du]) break;
      for (int k = 0; k < 3; ++k) off[k] -= plan.strides[du][k] * plan.extent[du];
      counter[du] = 0;
      --d;
    }
    if (d < 0) return;
  }
}

std::vector<Index> contiguous_strides(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<std::size_t>(i)] =
        s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  return s;
}

template <typename S, typename F>
Tensor<S> map_binary(const Tensor<S>& a, const Tensor<S>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<S> out = Tensor<S>::empty(a.shape());
    const S* pa = a.raw();
    const S* pb = b.raw();
    S* po = out.raw();
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::empty(shape);
  const LoopPlan plan =
      make_plan(shape, contiguous_strides(shape),
                broadcast_strides(a.shape(), shape),
                broadcast_strides(b.shape(), shape));
  const S* pa = a.raw();
  const S* pb = b.raw();
  S* po = out.raw();
  run_plan(plan, [&](Index len, const std::array<Index, 3>& off,
                     const std::array<Index, 3>& st) {
    S* o = po + off[0];
    const S* x = pa + off[1];
    const S* y = pb + off[2];
    for (Index i = 0; i < len; ++i) o[i * st[0]] = f(x[i * st[1]], y[i * st[2]]);
  });
  return out;
}

template <typename S, typename F>
Tensor<S> map_unary(const Tensor<S>& a, F f) {
  Tensor<S> out = Tensor<S>::empty(a.shape());
  const S* pa = a.raw();
  S* po = out.raw();
  const Index n = out.numel();
  for (Index i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

template <typename S>
Tensor<S> sum_to_kernel(const Tensor<S>& a, const Shape& target) {
  if (a.shape() == target) return a;
  // Validate that target broadcasts to a's shape.
  const Shape bshape = broadcast_shape(target, a.shape());
  if (bshape != a.shape())
    throw ShapeError("sum_to: " + to_string(target) +
                     " does not broadcast to " + to_string(a.shape()));
  std::vector<double> acc(static_cast<std::size_t>(numel(target)), 0.0);
  const std::vector<Index> zero(a.shape().size(), 0);
  const LoopPlan plan = make_plan(a.shape(), contiguous_strides(a.shape()),
                                  broadcast_strides(target, a.shape()), zero);
  const S* pa = a.raw();
  double* pt = acc.data();
  run_plan(plan, [&](Index len, const std::array<Index, 3>& off,
                     const std::array<Index, 3>& st) {
    const S* x = pa + off[0];
    double* t = pt + off[1];
    if (st[1] == 0) {
      double s = 0;
      for (Index i = 0; i < len; ++i) s += x[i * st[0]];
      *t += s;
    } else {
      for (Index i = 0; i < len; ++i) t[i * st[1]] += x[i * st[0]];
    }
  });
  Tensor<S> out = Tensor<S>::empty(target);
  std::transform(acc.begin(), acc.end(), out.raw(),
                 [](double v) { return static_cast<S>(v); });
  return out;
}

template <typename S>
Tensor<S> broadcast_kernel(const Tensor<S>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor<S> out = Tensor<S>::empty(shape);
  const std::vector<Index> zero(shape.size(), 0);
  const LoopPlan plan = make_plan(shape, contiguous_strides(shape),
                                  broadcast_strides(a.shape(), shape), zero);
  const S* pa = a.raw();
  S* po = out.raw();
  run_plan(plan, [&](Index len, const std::array<Index, 3>& off,
                     const std::array<Index, 3>& st) {
    S* o = po + off[0];
    const S* x = pa + off[1];
    for (Index i = 0; i < len; ++i) o[i * st[0]] = x[i * st[1]];
  });
  return out;
}

template <typename S>
Tensor<S> reduce_grad(const Tensor<S>& g, const Shape& shape) {
  return g.shape() == shape ? g : sum_to(g, shape);
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  return axis;
}

}  // namespace

// ------------------------------------------------------------------- binary

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = map_binary(a, b, [](S x, S y) { return x + y; });
  check_finite(out, "add");
  const Shape sa = a.shape(), sb = b.shape();
  return record(out, "add", {a, b}, [sa, sb](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{reduce_grad(g, sa), reduce_grad(g, sb)};
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = map_binary(a, b, [](S x, S y) { return x - y; });
  check_finite(out, "sub");
  const Shape sa = a.shape(), sb = b.shape();
  return record(out, "sub", {a, b}, [sa, sb](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{reduce_grad(g, sa), reduce_grad(neg(g), sb)};
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = map_binary(a, b, [](S x, S y) { return x * y; });
  check_finite(out, "mul");
  return record(out, "mul", {a, b}, [a, b](const Tensor<S>& g) {
    Tensor<S> ga, gb;
    if (a.requires_grad()) ga = reduce_grad(mul(g, b), a.shape());
    if (b.requires_grad()) gb = reduce_grad(mul(g, a), b.shape());
    return std::vector<Tensor<S>>{ga, gb};
  });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = map_binary(a, b, [](S x, S y) { return x / y; });
  check_finite(out, "div");
  return record(out, "div", {a, b}, [a, b](const Tensor<S>& g) {
    Tensor<S> ga, gb;
    if (a.requires_grad()) ga = reduce_grad(div(g, b), a.shape());
    if (b.requires_grad())
      gb = reduce_grad(neg(div(mul(g, a), square(b))), b.shape());
    return std::vector<Tensor<S>>{ga, gb};
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  Tensor<S> out = map_unary(a, [value](S x) { return x + value; });
  check_finite(out, "add_scalar");
  return record(out, "add_scalar", {a}, [](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{g};
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S value) {
  Tensor<S> out = map_unary(a, [value](S x) { return x * value; });
  check_finite(out, "mul_scalar");
  return record(out, "mul_scalar", {a}, [value](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{mul_scalar(g, value)};
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return -x; });
  return record(out, "neg", {a}, [](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{neg(g)};
  });
}

// -------------------------------------------------------------------- unary

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return std::exp(x); });
  check_finite(out, "exp");
  return record(out, "exp", {a}, [a](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{mul(g, exp(a))};
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return std::log(x); });
  check_finite(out, "log");
  return record(out, "log", {a}, [a](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{div(g, a)};
  });
}

template <typename S>
Tensor<S> pow(const Tensor<S>& a, S exponent) {
  Tensor<S> out = map_unary(a, [exponent](S x) { return std::pow(x, exponent); });
  check_finite(out, "pow");
  return record(out, "pow", {a}, [a, exponent](const Tensor<S>& g) {
    if (exponent == S(1)) return std::vector<Tensor<S>>{g};
    return std::vector<Tensor<S>>{
        mul(g, mul_scalar(pow(a, exponent - S(1)), exponent))};
  });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return pow(a, S(0.5));
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return x * x; });
  check_finite(out, "square");
  return record(out, "square", {a}, [a](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{mul(g, mul_scalar(a, S(2)))};
  });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return std::abs(x); });
  return record(out, "abs", {a}, [a](const Tensor<S>& g) {
    const Tensor<S> sign =
        map_unary(a, [](S x) { return x > 0 ? S(1) : (x < 0 ? S(-1) : S(0)); });
    return std::vector<Tensor<S>>{mul(g, sign)};
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return x > 0 ? x : S(0); });
  return record(out, "relu", {a}, [a](const Tensor<S>& g) {
    const Tensor<S> mask = map_unary(a, [](S x) { return x > 0 ? S(1) : S(0); });
    return std::vector<Tensor<S>>{mul(g, mask)};
  });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, S slope) {
  Tensor<S> out =
      map_unary(a, [slope](S x) { return std::max(x, S(0)) + slope * std::min(x, S(0)); });
  return record(out, "leaky_relu", {a}, [a, slope](const Tensor<S>& g) {
    const Tensor<S> mask =
        map_unary(a, [slope](S x) { return slope + (S(1) - slope) * S(x > 0); });
    return std::vector<Tensor<S>>{mul(g, mask)};
  });
}

namespace {
template <typename S>
S stable_sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}
}  // namespace

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return stable_sigmoid(x); });
  return record(out, "sigmoid", {a}, [a](const Tensor<S>& g) {
    const Tensor<S> s = sigmoid(a);
    return std::vector<Tensor<S>>{mul(g, mul(s, add_scalar(neg(s), S(1))))};
  });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) { return std::tanh(x); });
  return record(out, "tanh", {a}, [a](const Tensor<S>& g) {
    const Tensor<S> t = tanh(a);
    return std::vector<Tensor<S>>{mul(g, add_scalar(neg(square(t)), S(1)))};
  });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  Tensor<S> out = map_unary(a, [](S x) {
    return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
  });
  check_finite(out, "softplus");
  return record(out, "softplus", {a}, [a](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{mul(g, sigmoid(a))};
  });
}

// --------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  if (a.shape().empty()) return a;
  Tensor<S> out = sum_to_kernel(a, Shape{});
  check_finite(out, "sum");
  const Shape sa = a.shape();
  return record(out, "sum", {a}, [sa](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{broadcast_to(g, sa)};
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return mul_scalar(sum(a), S(1) / static_cast<S>(a.numel()));
}

template <typename S>
Tensor<S> sum_to(const Tensor<S>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor<S> out = sum_to_kernel(a, shape);
  check_finite(out, "sum_to");
  const Shape sa = a.shape();
  return record(out, "sum_to", {a}, [sa](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{broadcast_to(g, sa)};
  });
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor<S> out = broadcast_kernel(a, shape);
  const Shape sa = a.shape();
  return record(out, "broadcast_to", {a}, [sa](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{sum_to(g, sa)};
  });
}

template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  Shape target = a.shape();
  target[static_cast<std::size_t>(axis)] = 1;
  if (target == a.shape()) return a;
  return sum_to(a, target);
}

template <typename S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis) {
  const Index len = a.dim(axis);
  return mul_scalar(sum_axis(a, axis), S(1) / static_cast<S>(len));
}

// ------------------------------------------------------------ softmax family

namespace {
struct AxisSplit {
  Index outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}
}  // namespace

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_axis(a.shape(), axis);
  Tensor<S> out = Tensor<S>::empty(a.shape());
  const S* x = a.raw();
  S* y = out.raw();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.len * sp.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      S total = 0;
      for (Index k = 0; k < sp.len; ++k) {
        const S e = std::exp(x[base + k * sp.inner] - mx);
        y[base + k * sp.inner] = e;
        total += e;
      }
      const S inv = S(1) / total;
      for (Index k = 0; k < sp.len; ++k) y[base + k * sp.inner] *= inv;
    }
  }
  check_finite(out, "softmax");
  return record(out, "softmax", {a}, [a, axis](const Tensor<S>& g) {
    const Tensor<S> s = softmax(a, axis);
    const Tensor<S> dot = sum_axis(mul(g, s), axis);
    return std::vector<Tensor<S>>{mul(s, sub(g, dot))};
  });
}

template <typename S>
Tensor<S> logsumexp(const Tensor<S>& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_axis(a.shape(), axis);
  Shape oshape = a.shape();
  oshape[static_cast<std::size_t>(axis)] = 1;
  Tensor<S> out = Tensor<S>::empty(oshape);
  const S* x = a.raw();
  S* y = out.raw();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.len * sp.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      S total = 0;
      for (Index k = 0; k < sp.len; ++k) total += std::exp(x[base + k * sp.inner] - mx);
      y[o * sp.inner + in] = mx + std::log(total);
    }
  }
  check_finite(out, "logsumexp");
  return record(out, "logsumexp", {a}, [a, axis](const Tensor<S>& g) {
    return std::vector<Tensor<S>>{mul(g, softmax(a, axis))};
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a, int axis) {
  return sub(a, logsumexp(a, axis));
}

#define MCSAGAN_INSTANTIATE(S)                                           \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                    \
  template Tensor<S> mul_scalar(const Tensor<S>&, S);                    \
  template Tensor<S> neg(const Tensor<S>&);                              \
  template Tensor<S> exp(const Tensor<S>&);                              \
  template Tensor<S> log(const Tensor<S>&);                              \
  template Tensor<S> pow(const Tensor<S>&, S);                           \
  template Tensor<S> sqrt(const Tensor<S>&);                             \
  template Tensor<S> square(const Tensor<S>&);                           \
  template Tensor<S> abs(const Tensor<S>&);                              \
  template Tensor<S> relu(const Tensor<S>&);                             \
  template Tensor<S> leaky_relu(const Tensor<S>&, S);                    \
  template Tensor<S> sigmoid(const Tensor<S>&);                          \
  template Tensor<S> tanh(const Tensor<S>&);                             \
  template Tensor<S> softplus(const Tensor<S>&);                         \
  template Tensor<S> sum(const Tensor<S>&);                              \
  template Tensor<S> mean(const Tensor<S>&);                             \
  template Tensor<S> sum_to(const Tensor<S>&, const Shape&);             \
  template Tensor<S> broadcast_to(const Tensor<S>&, const Shape&);       \
  template Tensor<S> sum_axis(const Tensor<S>&, int);                    \
  template Tensor<S> mean_axis(const Tensor<S>&, int);                   \
  template Tensor<S> softmax(const Tensor<S>&, int);                     \
  template Tensor<S> logsumexp(const Tensor<S>&, int);                   \
  template Tensor<S> log_softmax(const Tensor<S>&, int);

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
