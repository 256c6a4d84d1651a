#include "grc/cache.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "grc/binary_io.hpp"
#include "grc/ops.hpp"
#include "grc/random.hpp"

namespace grc {

namespace {

constexpr std::string_view kCacheMagic = "GRCC";
constexpr std::uint32_t kCacheVersion = 1;

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  Tensor<T> t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

std::size_t cache_width(std::size_t d_model, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw ConfigError("caching ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  const auto width = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(d_model) + 0.5));
  if (width == 0) {
    throw ConfigError("caching ratio " + std::to_string(ratio) + " leaves no cache channels for width " +
                      std::to_string(d_model));
  }
  return width;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, double ratio) {
  if (x.rank() == 0) throw DimensionError("slice_channels on a scalar");
  const std::size_t width = cache_width(x.dim(-1), ratio);
  if (width == x.dim(-1)) return x;
  return ops::slice_lastdim(x, 0, width);
}

template <typename T>
Tensor<T> token_interpolate(const Tensor<T>& xbar, std::size_t cache_len, std::span<const std::size_t> lengths) {
  if (xbar.rank() < 2) throw DimensionError("token_interpolate: expected [.., T, D_m], got " + to_string(xbar.shape()));
  const bool full = std::all_of(lengths.begin(), lengths.end(), [&](std::size_t l) { return l == xbar.dim(-2); });
  if (xbar.dim(-2) == cache_len && full) return xbar;
  return ops::interpolate_tokens(xbar, cache_len, lengths);
}

template <typename T>
GrcCache<T>::GrcCache(std::size_t length, std::size_t width, double ratio, std::uint64_t seed, std::string name,
                      std::size_t bptt_steps)
    : length_(length), width_(width), ratio_(ratio), name_(std::move(name)), bptt_steps_(bptt_steps) {
  if (length == 0 || width == 0) {
    throw ConfigError("cache needs positive length and width, got " + std::to_string(length) + "x" +
                      std::to_string(width));
  }
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("caching ratio must lie in (0, 1]");
  if (bptt_steps == 0) throw ConfigError("cache bptt_steps must be >= 1");
  state_ = Tensor<T>({length, width});
  const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(width));
  w_update_ = uniform_param<T>({2 * width, width}, bound, derive_seed(seed, name_ + ".w_update"));
  w_reset_ = uniform_param<T>({2 * width, width}, bound, derive_seed(seed, name_ + ".w_reset"));
  w_candidate_ = uniform_param<T>({2 * width, width}, bound, derive_seed(seed, name_ + ".w_candidate"));
  b_update_ = zero_param<T>({width});
  b_reset_ = zero_param<T>({width});
  b_candidate_ = zero_param<T>({width});
}

template <typename T>
void GrcCache<T>::set_state(std::span<const T> values) {
  state_.assign(values);
}

template <typename T>
Gates<T> GrcCache<T>::compute_gates(const Tensor<T>& xbar, const Tensor<T>& prev) const {
  if (prev.shape() != Shape{length_, width_}) {
    throw DimensionError("cache state shape " + to_string(prev.shape()) + " does not match cache " +
                         to_string({length_, width_}));
  }
  if (xbar.rank() < 2 || xbar.dim(-2) != length_ || xbar.dim(-1) != width_) {
    throw DimensionError("cache input " + to_string(xbar.shape()) + " does not match cache " +
                         to_string({length_, width_}));
  }
  Tensor<T> prev_b = xbar.rank() == 2 ? prev : ops::broadcast_batch(prev, xbar.dim(0));
  if (xbar.rank() > 3) throw DimensionError("cache input must be [T_m, D_m] or [B, T_m, D_m]");
  const Tensor<T> joined = ops::concat_lastdim(xbar, prev_b);
  return {ops::sigmoid(ops::add_bias(ops::matmul(joined, w_update_), b_update_)),
          ops::sigmoid(ops::add_bias(ops::matmul(joined, w_reset_), b_reset_))};
}

template <typename T>
Tensor<T> GrcCache<T>::candidate(const Tensor<T>& xbar, const Tensor<T>& prev, const Tensor<T>& reset) const {
  Tensor<T> prev_b = xbar.rank() == 2 ? prev : ops::broadcast_batch(prev, xbar.dim(0));
  const Tensor<T> joined = ops::concat_lastdim(xbar, ops::mul(reset, prev_b));
  return ops::add_bias(ops::matmul(joined, w_candidate_), b_candidate_);
}

template <typename T>
Tensor<T> GrcCache<T>::step_items(const Tensor<T>& xbar, const Tensor<T>& prev, GateStats* stats) const {
  const Gates<T> g = compute_gates(xbar, prev);
  const Tensor<T> cand = candidate(xbar, prev, g.reset);
  Tensor<T> prev_b = xbar.rank() == 2 ? prev : ops::broadcast_batch(prev, xbar.dim(0));
  // (1 - g_u) * C_prev + g_u * C~
  const Tensor<T> keep = ops::mul(ops::add_scalar(ops::scale(g.update, T(-1)), T(1)), prev_b);
  const Tensor<T> next = ops::add(keep, ops::mul(g.update, cand));
  if (stats) {
    double su = 0.0, sr = 0.0;
    for (T v : g.update.data()) su += static_cast<double>(v);
    for (T v : g.reset.data()) sr += static_cast<double>(v);
    stats->mean_update = su / static_cast<double>(g.update.size());
    stats->mean_reset = sr / static_cast<double>(g.reset.size());
  }
  return next;
}

template <typename T>
Tensor<T> GrcCache<T>::update(const Tensor<T>& xbar) {
  if (frozen_) throw StateError("update on frozen cache '" + name_ + "'");
  if (xbar.rank() != 3 || xbar.dim(1) != length_ || xbar.dim(2) != width_) {
    throw DimensionError("cache update expects [B, " + std::to_string(length_) + ", " + std::to_string(width_) +
                         "], got " + to_string(xbar.shape()));
  }
  Tensor<T> c = history_.empty() ? state_.detach() : history_.front().state_before.detach();
  for (const HistoryEntry& h : history_) c = ops::mean_axis(step_items(h.input, c), 0);
  const Tensor<T> next = ops::mean_axis(step_items(xbar, c, &last_stats_), 0);

  if (bptt_steps_ > 1) {
    history_.push_back({state_.detach(), xbar.detach()});
    while (history_.size() > bptt_steps_ - 1) history_.pop_front();
  }
  state_ = next.detach();
  ++step_;
  return next;
}

template <typename T>
std::vector<NamedTensor<T>> GrcCache<T>::parameters() {
  return {{name_ + ".w_update", w_update_, true},       {name_ + ".b_update", b_update_, false},
          {name_ + ".w_reset", w_reset_, true},         {name_ + ".b_reset", b_reset_, false},
          {name_ + ".w_candidate", w_candidate_, true}, {name_ + ".b_candidate", b_candidate_, false}};
}

template <typename T>
typename GrcCache<T>::Snapshot GrcCache<T>::snapshot() const {
  Snapshot s;
  s.state.assign(state_.data().begin(), state_.data().end());
  s.step = step_;
  s.frozen = frozen_;
  for (const HistoryEntry& h : history_) s.history.emplace_back(h.state_before.detach(), h.input.detach());
  return s;
}

template <typename T>
void GrcCache<T>::restore(const Snapshot& s) {
  state_ = Tensor<T>({length_, width_}, s.state);
  step_ = s.step;
  frozen_ = s.frozen;
  history_.clear();
  for (const auto& [before, input] : s.history) history_.push_back({before.detach(), input.detach()});
}

template <typename T>
void GrcCache<T>::save(std::ostream& os) const {
  io::write_magic(os, kCacheMagic);
  io::write_u32(os, kCacheVersion);
  io::write_u8(os, sizeof(T));
  io::write_u64(os, length_);
  io::write_u64(os, width_);
  io::write_f64(os, ratio_);
  io::write_u64(os, step_);
  io::write_u8(os, frozen_ ? 1 : 0);
  io::write_values<T>(os, state_.data());
  io::write_values<T>(os, w_update_.data());
  io::write_values<T>(os, w_reset_.data());
  io::write_values<T>(os, w_candidate_.data());
  io::write_values<T>(os, b_update_.data());
  io::write_values<T>(os, b_reset_.data());
  io::write_values<T>(os, b_candidate_.data());
  io::write_u64(os, bptt_steps_);
  io::write_u64(os, history_.size());
  for (const HistoryEntry& h : history_) {
    io::write_values<T>(os, h.state_before.data());
    io::write_u64(os, h.input.dim(0));
    io::write_values<T>(os, h.input.data());
  }
}

template <typename T>
void GrcCache<T>::load(std::istream& is) {
  io::expect_magic(is, kCacheMagic, "GRC cache block");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCacheVersion) throw IoError("unsupported cache block version " + std::to_string(version));
  if (io::read_u8(is) != sizeof(T)) throw IoError("cache block precision does not match");
  const std::uint64_t length = io::read_u64(is);
  const std::uint64_t width = io::read_u64(is);
  if (length != length_ || width != width_) {
    throw IoError("cache block is " + std::to_string(length) + "x" + std::to_string(width) + ", expected " +
                  std::to_string(length_) + "x" + std::to_string(width_));
  }
  ratio_ = io::read_f64(is);
  step_ = io::read_u64(is);
  frozen_ = io::read_u8(is) != 0;
  io::read_values<T>(is, state_.data());
  io::read_values<T>(is, w_update_.data());
  io::read_values<T>(is, w_reset_.data());
  io::read_values<T>(is, w_candidate_.data());
  io::read_values<T>(is, b_update_.data());
  io::read_values<T>(is, b_reset_.data());
  io::read_values<T>(is, b_candidate_.data());
  bptt_steps_ = io::read_u64(is);
  const std::uint64_t entries = io::read_u64(is);
  if (entries >= bptt_steps_ && entries != 0) throw IoError("cache history longer than its replay window");
  history_.clear();
  for (std::uint64_t i = 0; i < entries; ++i) {
    Tensor<T> before({length_, width_});
    io::read_values<T>(is, before.data());
    const std::uint64_t batch = io::read_u64(is);
    if (batch == 0 || batch > (1u << 20)) throw IoError("implausible batch size in cache history");
    Tensor<T> input({batch, length_, width_});
    io::read_values<T>(is, input.data());
    history_.push_back({before, input});
  }
}

template class GrcCache<float>;
template class GrcCache<double>;

template Tensor<float> slice_channels(const Tensor<float>&, double);
template Tensor<double> slice_channels(const Tensor<double>&, double);
template Tensor<float> token_interpolate(const Tensor<float>&, std::size_t, std::span<const std::size_t>);
template Tensor<double> token_interpolate(const Tensor<double>&, std::size_t, std::span<const std::size_t>);

}  // namespace grc
