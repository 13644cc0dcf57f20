#include "mcsagan/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mcsagan/parallel.hpp"

namespace mcsagan {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
bool g_finite_checks = true;
int g_threads = -1;

#if defined(__GLIBC__)
// Activation buffers are large and short-lived. Keep them off mmap and keep
// freed pages in the heap, or the kernel zero-fills every allocation.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

int thread_count() {
  if (g_threads < 0) {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MCSAGAN_THREADS")) {
      const int requested = std::atoi(env);
      if (requested > 0) n = requested;
    }
    g_threads = std::max(1, n);
  }
  return g_threads;
}

void set_thread_count(int n) { g_threads = std::max(1, n); }

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t)>& body) {
  const std::int64_t workers =
      std::min<std::int64_t>(thread_count(), std::max<std::int64_t>(n, 1));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::int64_t w = 0; w < workers; ++w) {
    const std::int64_t begin = n * w / workers;
    const std::int64_t end = n * (w + 1) / workers;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::int64_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ------------------------------------------------------------------ Tensor

template <typename S>
Tensor<S> Tensor<S>::empty(Shape shape) {
  for (Index d : shape)
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->storage =
      std::make_shared<std::vector<S>>(static_cast<std::size_t>(mcsagan::numel(shape)));
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape) {
  return empty(std::move(shape));
}

template <typename S>
Tensor<S> Tensor<S>::ones(Shape shape) {
  return full(std::move(shape), S(1));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value) {
  Tensor t = empty(std::move(shape));
  std::fill(t.impl_->storage->begin(), t.impl_->storage->end(), value);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value) {
  return full(Shape{}, value);
}

template <typename S>
Tensor<S> Tensor<S>::from_vector(Shape shape, std::vector<S> values) {
  if (mcsagan::numel(shape) != static_cast<Index>(values.size()))
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + to_string(shape));
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<std::vector<S>>(std::move(values));
  return Tensor(std::move(impl));
}

template <typename S>
Tensor<S> Tensor<S>::randn(Shape shape, std::mt19937_64& rng, S stddev) {
  Tensor t = empty(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (S& v : *t.impl_->storage) v = static_cast<S>(dist(rng)) * stddev;
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::uniform(Shape shape, std::mt19937_64& rng, S lo, S hi) {
  Tensor t = empty(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (S& v : *t.impl_->storage) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
const Shape& Tensor<S>::shape() const {
  if (!impl_) throw AutogradError("use of an undefined tensor");
  return impl_->shape;
}

template <typename S>
Index Tensor<S>::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis out of range for shape " + to_string(s));
  return s[static_cast<std::size_t>(axis)];
}

template <typename S>
Index Tensor<S>::numel() const {
  return mcsagan::numel(shape());
}

template <typename S>
std::span<S> Tensor<S>::data() {
  return {impl_->storage->data(), impl_->storage->size()};
}

template <typename S>
std::span<const S> Tensor<S>::data() const {
  return {impl_->storage->data(), impl_->storage->size()};
}

template <typename S>
S* Tensor<S>::raw() {
  return impl_->storage->data();
}

template <typename S>
const S* Tensor<S>::raw() const {
  return impl_->storage->data();
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1)
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return (*impl_->storage)[0];
}

template <typename S>
bool Tensor<S>::requires_grad() const {
  return impl_ && (impl_->requires_grad || impl_->grad_fn != nullptr);
}

template <typename S>
Tensor<S>& Tensor<S>::set_requires_grad(bool flag) {
  if (impl_->grad_fn)
    throw AutogradError("requires_grad can only be set on leaf tensors");
  if (flag && impl_->frozen)
    throw AutogradError("cannot enable gradients on a frozen tensor");
  impl_->requires_grad = flag;
  return *this;
}

template <typename S>
bool Tensor<S>::is_leaf() const {
  return impl_->grad_fn == nullptr;
}

template <typename S>
void Tensor<S>::freeze() {
  impl_->requires_grad = false;
  impl_->frozen = true;
  impl_->grad = Tensor();
}

template <typename S>
bool Tensor<S>::frozen() const {
  return impl_->frozen;
}

template <typename S>
const Tensor<S>& Tensor<S>::grad() const {
  return impl_->grad;
}

template <typename S>
bool Tensor<S>::has_grad() const {
  return impl_->grad.defined();
}

template <typename S>
void Tensor<S>::zero_grad() {
  impl_->grad = Tensor();
}

template <typename S>
void Tensor<S>::set_grad(Tensor g) {
  if (g.defined() && g.shape() != shape())
    throw ShapeError("gradient shape " + to_string(g.shape()) +
                     " does not match " + to_string(shape()));
  impl_->grad = std::move(g);
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->shape = impl_->shape;
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

template <typename S>
Tensor<S> Tensor<S>::clone() const {
  return from_vector(shape(), *impl_->storage);
}

template <typename S>
std::shared_ptr<Node<S>> Tensor<S>::grad_fn() const {
  return impl_->grad_fn;
}

template <typename S>
void Tensor<S>::set_grad_fn(std::shared_ptr<Node<S>> node) {
  impl_->grad_fn = std::move(node);
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* where) {
  if (!g_finite_checks) return;
  // x*0 is NaN exactly when x is not finite; the vectorized sum propagates it.
  Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> a(t.raw(), t.numel());
  if (!std::isfinite((a * S(0)).sum()))
    throw NumericError(std::string("non-finite value produced by ") + where);
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(static_cast<std::size_t>(t.numel()));
  std::transform(t.data().begin(), t.data().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>::from_vector(t.shape(), std::move(out));
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite(const Tensor<float>&, const char*);
template void check_finite(const Tensor<double>&, const char*);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace mcsagan
