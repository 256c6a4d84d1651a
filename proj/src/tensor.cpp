#include "grc/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace grc {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
  if (values.size() != numel(shape)) {
    throw DimensionError("tensor of shape " + to_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::assign(std::span<const T> values) {
  if (values.size() != impl_->data.size()) {
    throw DimensionError("assign: " + std::to_string(values.size()) + " values into shape " + to_string(shape()));
  }
  std::copy(values.begin(), values.end(), impl_->data.begin());
}

template class Tensor<float>;
template class Tensor<double>;

namespace {
thread_local Tape* current_tape = nullptr;
}

void Tape::record(Backward fn) {
  if (consumed_) throw StateError("recording onto a consumed tape; call clear() first");
  ops_.push_back(std::move(fn));
}

void Tape::run_reverse() {
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() {
  ops_.clear();
  consumed_ = false;
}

Tape* active_tape() { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

}  // namespace grc

// Rng lives here too; it is small and shared by every module.
#include <cmath>
#include <numbers>
#include <sstream>

#include "grc/random.hpp"

namespace grc {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ConfigError("Rng::below(0)");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % bound);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw DataError("malformed RNG state");
}

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t z = seed ^ stable_hash(tag);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace grc
