#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "grc/error.hpp"

namespace grc {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer.
///
/// A Tensor is a reference-counted handle: copies share the same storage,
/// which is what lets the tape accumulate adjoints into parameters owned
/// elsewhere. Use clone()/detach() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Size of one axis; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty() || impl_->data.empty(); }
  /// Gradient buffer, zero-allocated on first access. Like the storage it
  /// belongs to the shared handle, so constness of the handle does not apply.
  std::span<T> grad() const;
  void zero_grad();

  /// Independent copy of the values; no gradient, not tracked.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }
  void assign(std::span<const T> values);

  bool shares_storage_with(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of executed differentiable operations.
///
/// Ops append a closure while a tape is active (see TapeScope); backward()
/// runs the closures in exact reverse order. A tape can be consumed once;
/// clear() makes it reusable for the next forward pass.
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn);

  template <typename T>
  void backward(Tensor<T>& root) {
    if (consumed_) {
      throw StateError("Tape::backward called twice without a new forward pass");
    }
    if (root.size() != 1) {
      throw DimensionError("Tape::backward needs a scalar root, got shape " + to_string(root.shape()));
    }
    consumed_ = true;
    root.grad()[0] += T(1);
    run_reverse();
  }

  void clear();
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

 private:
  void run_reverse();

  std::vector<Backward> ops_;
  bool consumed_ = false;
};

/// The tape ops record onto on this thread, or nullptr when not tracking.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the enclosed scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace grc
