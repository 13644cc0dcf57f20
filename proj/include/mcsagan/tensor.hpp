#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcsagan {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised for incompatible shapes or invalid arguments to an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value becomes NaN/Inf or a numeric guard trips.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the autodiff machinery (released graph, frozen leaf, ...).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Scalar>
class Tensor;
template <typename Scalar>
struct TensorImpl;

/// One recorded operation. `inputs` are the differentiable parents; the
/// backward function maps the output gradient to one gradient per input
/// (an undefined tensor means "no contribution").
template <typename Scalar>
struct Node {
  using BackwardFn =
      std::function<std::vector<Tensor<Scalar>>(const Tensor<Scalar>&)>;

  std::string name;
  std::vector<Tensor<Scalar>> inputs;
  BackwardFn backward;
  bool released = false;
};

/// Value handle to a dense row-major tensor. Copies share storage.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<Scalar>> impl)
      : impl_(std::move(impl)) {}

  static Tensor empty(Shape shape);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor scalar(Scalar value);
  static Tensor from_vector(Shape shape, std::vector<Scalar> values);
  static Tensor randn(Shape shape, std::mt19937_64& rng, Scalar stddev = 1);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, Scalar lo,
                        Scalar hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  Index dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  Index numel() const;

  std::span<Scalar> data();
  std::span<const Scalar> data() const;
  Scalar* raw();
  const Scalar* raw() const;
  Scalar item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  /// A frozen leaf refuses to re-enable gradients and raises if a backward
  /// pass ever tries to accumulate into it.
  void freeze();
  bool frozen() const;

  const Tensor& grad() const;
  bool has_grad() const;
  void zero_grad();
  void set_grad(Tensor g);

  /// Shares storage, drops history.
  Tensor detach() const;
  /// Deep copy of the values, no history.
  Tensor clone() const;

  std::shared_ptr<Node<Scalar>> grad_fn() const;
  void set_grad_fn(std::shared_ptr<Node<Scalar>> node);

  TensorImpl<Scalar>* impl() const { return impl_.get(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<Scalar>> impl_;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<Scalar>> storage;
  bool requires_grad = false;
  bool frozen = false;
  std::shared_ptr<Node<Scalar>> grad_fn;
  Tensor<Scalar> grad;
};

/// Thread-local switch controlling whether ops record history.
bool grad_enabled();
void set_grad_enabled(bool enabled);

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool enabled = true) : previous_(grad_enabled()) {
    set_grad_enabled(enabled);
  }
  ~EnableGradGuard() { set_grad_enabled(previous_); }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// When enabled (the default) every op output is scanned for NaN/Inf.
bool finite_checks_enabled();
void set_finite_checks(bool enabled);

template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const char* where);

/// Convert between precisions (no history).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

}  // namespace mcsagan
