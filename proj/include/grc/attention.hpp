#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "grc/cache.hpp"
#include "grc/ops.hpp"
#include "grc/tensor.hpp"

namespace grc {

struct AttentionDims {
  std::size_t d_model = 0;
  std::size_t heads = 1;
  std::size_t cache_len = 1;
  double ratio = 0.5;
  bool use_cache = true;
  std::size_t bptt_steps = 1;

  /// D_m; throws ConfigError for an invalid ratio.
  std::size_t cache_width() const { return grc::cache_width(d_model, ratio); }
  /// Throws ConfigError naming the violated constraint.
  void validate() const;
};

/// Dense affine map with weight stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
  bool has_bias = true;

  static Linear make(std::size_t in, std::size_t out, bool bias, std::uint64_t seed);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void append_parameters(std::vector<NamedTensor<T>>& out, const std::string& name) const;
};

/// Multi-head attention over the current tokens mixed per head with
/// attention over a gated recurrent cache.
///
/// forward() follows the training-step order: slice channels, interpolate to
/// the cache length, update the cache, attend to self and to the updated
/// cache, mix heads with sigmoid(lambda), concatenate, output projection.
/// With training == false the cache is only read.
///
/// Cached-branch queries and keys are D_m wide (D_m/H per head, scaled by
/// sqrt(D_m/H)); cached values are D wide so each head yields D/H channels,
/// the same as the self branch. Key projections carry no bias: softmax is
/// invariant to it.
template <typename T>
class GrcAttention {
 public:
  GrcAttention(const AttentionDims& dims, std::uint64_t seed, std::string name = "attn");

  const AttentionDims& dims() const { return dims_; }
  bool has_cache() const { return cache_ != nullptr; }

  Tensor<T> forward(const Tensor<T>& x, bool training, const ops::KeyMask& mask = {});

  /// Per-head self-attention outputs [B, H, T, D/H].
  Tensor<T> self_heads(const Tensor<T>& x, const ops::KeyMask& mask = {}) const;
  /// Per-head cached attention outputs [B, H, T, D/H] for queries from
  /// xbar [B, T, D_m] against cache [T_m, D_m].
  Tensor<T> cached_heads(const Tensor<T>& xbar, const Tensor<T>& cache) const;
  /// Heads concatenated, before the output projection: [B, T, D].
  Tensor<T> self_attention(const Tensor<T>& x, const ops::KeyMask& mask = {}) const;
  Tensor<T> cached_attention(const Tensor<T>& xbar, const Tensor<T>& cache) const;

  /// Attention weights [B, H, T, T] and [B, H, T, T_m].
  Tensor<T> self_probs(const Tensor<T>& x, const ops::KeyMask& mask = {}) const;
  Tensor<T> cached_probs(const Tensor<T>& xbar, const Tensor<T>& cache) const;

  /// sigmoid(lambda_h) for every head; empty without a cache.
  std::vector<double> mixing_ratios() const;

  Tensor<T>& lambda() { return lambda_; }
  Linear<T>& query() { return q_; }
  Linear<T>& key() { return k_; }
  Linear<T>& value() { return v_; }
  Linear<T>& output() { return o_; }
  Linear<T>& mem_query() { return qm_; }
  Linear<T>& mem_key() { return km_; }
  Linear<T>& mem_value() { return vm_; }
  GrcCache<T>* cache() { return cache_.get(); }
  const GrcCache<T>* cache() const { return cache_.get(); }

  std::vector<NamedTensor<T>> parameters();

 private:
  Tensor<T> self_scores(const Tensor<T>& x, Tensor<T>& values) const;
  Tensor<T> cached_scores(const Tensor<T>& xbar, const Tensor<T>& cache, Tensor<T>& values) const;

  AttentionDims dims_;
  std::string name_;
  Linear<T> q_, k_, v_, o_;
  Linear<T> qm_, km_, vm_;
  Tensor<T> lambda_;
  std::unique_ptr<GrcCache<T>> cache_;
};

extern template struct Linear<float>;
extern template struct Linear<double>;
extern template class GrcAttention<float>;
extern template class GrcAttention<double>;

}  // namespace grc
