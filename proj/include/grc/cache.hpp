#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grc/tensor.hpp"

namespace grc {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // receives decoupled weight decay
};

/// Cache channel count D_m = round(ratio * d_model), rounding halves up.
/// Throws ConfigError for ratio outside (0, 1] or a zero-width result.
std::size_t cache_width(std::size_t d_model, double ratio);

/// Contiguous channel prefix X[..., 0:D_m] used to feed the cache.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, double ratio);

/// Resamples the sliced tokens to the cache length (identity when equal).
template <typename T>
Tensor<T> token_interpolate(const Tensor<T>& xbar, std::size_t cache_len, std::span<const std::size_t> lengths = {});

template <typename T>
struct Gates {
  Tensor<T> update;
  Tensor<T> reset;
};

struct GateStats {
  double mean_update = 0.0;
  double mean_reset = 0.0;
};

/// Gated recurrent cache: a fixed [T_m, D_m] memory updated once per
/// training step from the (sliced, interpolated) tokens of the batch.
///
///   g_u = sigmoid([X, C_prev] W_u + b_u)     g_r = sigmoid([X, C_prev] W_r + b_r)
///   C~  = [X, g_r * C_prev] W_c + b_c
///   C   = mean_batch((1 - g_u) * C_prev + g_u * C~)
///
/// C_prev enters each update as a constant, so gradients reach the gate
/// weights and the current tokens only. With bptt_steps = k > 1 the last
/// k - 1 updates are replayed on the current tape from stored inputs, which
/// extends the gradient through k recurrent applications.
template <typename T>
class GrcCache {
 public:
  struct Snapshot {
    std::vector<T> state;
    std::uint64_t step = 0;
    bool frozen = false;
    std::vector<std::pair<Tensor<T>, Tensor<T>>> history;  // (state before, input)
  };

  GrcCache(std::size_t length, std::size_t width, double ratio, std::uint64_t seed,
           std::string name = "cache", std::size_t bptt_steps = 1);

  /// Zero cache of the given size with seeded gate weights.
  static GrcCache init(std::size_t length, std::size_t width, std::uint64_t seed) {
    return GrcCache(length, width, 1.0, seed);
  }

  std::size_t length() const { return length_; }
  std::size_t width() const { return width_; }
  double ratio() const { return ratio_; }
  std::uint64_t step() const { return step_; }
  bool frozen() const { return frozen_; }
  std::size_t bptt_steps() const { return bptt_steps_; }
  const std::string& name() const { return name_; }

  /// Current cache C, shape [T_m, D_m]. Never tracked by the tape.
  const Tensor<T>& state() const { return state_; }
  void set_state(std::span<const T> values);

  Tensor<T>& w_update() { return w_update_; }
  Tensor<T>& w_reset() { return w_reset_; }
  Tensor<T>& w_candidate() { return w_candidate_; }
  Tensor<T>& b_update() { return b_update_; }
  Tensor<T>& b_reset() { return b_reset_; }
  Tensor<T>& b_candidate() { return b_candidate_; }

  /// xbar is [.., T_m, D_m]; prev is [T_m, D_m] and is shared by every item.
  Gates<T> compute_gates(const Tensor<T>& xbar, const Tensor<T>& prev) const;
  Tensor<T> candidate(const Tensor<T>& xbar, const Tensor<T>& prev, const Tensor<T>& reset) const;
  /// Per-item recurrent update before batch averaging.
  Tensor<T> step_items(const Tensor<T>& xbar, const Tensor<T>& prev, GateStats* stats = nullptr) const;

  /// Applies one recurrent update from xbar [B, T_m, D_m] and returns the new
  /// cache connected to the active tape. Throws StateError when frozen.
  Tensor<T> update(const Tensor<T>& xbar);

  void freeze() { frozen_ = true; }
  void thaw() { frozen_ = false; }

  const GateStats& last_gate_stats() const { return last_stats_; }

  std::vector<NamedTensor<T>> parameters();

  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

  /// Versioned little-endian layout: header, sizes, flags, C, gate weights,
  /// biases, then the replay history.
  void save(std::ostream& os) const;
  /// Reads a layout written by save(); sizes must match this cache.
  void load(std::istream& is);

 private:
  struct HistoryEntry {
    Tensor<T> state_before;
    Tensor<T> input;
  };

  std::size_t length_;
  std::size_t width_;
  double ratio_;
  std::string name_;
  std::size_t bptt_steps_;
  std::uint64_t step_ = 0;
  bool frozen_ = false;
  Tensor<T> state_;
  Tensor<T> w_update_, w_reset_, w_candidate_;
  Tensor<T> b_update_, b_reset_, b_candidate_;
  std::deque<HistoryEntry> history_;
  GateStats last_stats_;
};

extern template class GrcCache<float>;
extern template class GrcCache<double>;

}  // namespace grc
