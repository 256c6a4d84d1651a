#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace grc {

/// Seeded generator with a serializable state.
///
/// Wraps std::mt19937_64 but converts raw draws to reals and integers itself,
/// so streams only depend on the engine (the standard distributions are
/// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  std::string state() const;
  void set_state(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// FNV-1a; stable across builds, used to derive per-parameter seeds.
std::uint64_t stable_hash(std::string_view text);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

}  // namespace grc
