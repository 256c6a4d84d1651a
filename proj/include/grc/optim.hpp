#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "grc/cache.hpp"

namespace grc {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay, applied only to parameters whose
/// NamedTensor::decay flag is set.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<T>> params, AdamWConfig cfg);

  /// One update from the gradients currently held by the parameters.
  void step(double lr);
  std::uint64_t steps() const { return steps_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }

  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  std::vector<NamedTensor<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t steps_ = 0;
};

/// Linear warmup to `base` over `warmup` steps, then base * sqrt(warmup / s).
/// warmup == 0 gives a constant rate. `step` is zero-based.
double inverse_sqrt_lr(double base, std::size_t warmup, std::size_t step);

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 only measures.
template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace grc
