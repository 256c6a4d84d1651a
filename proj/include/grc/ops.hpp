#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "grc/random.hpp"
#include "grc/tensor.hpp"

// Differentiable tensor operations.
//
// Every op computes its forward value eagerly. When a tape is active and any
// input requires a gradient, the op also records its adjoint on the tape and
// marks the output as requiring a gradient. Broadcasting is limited to what
// the attention stack needs: a 2-D right operand shared across the leading
// batch dimensions of matmul, row-vector biases, and explicit
// broadcast_batch.

namespace grc::ops {

/// a[..., m, k] x b[..., k, n]; b may also be a shared [k, n] matrix.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a[..., m, k] x b[..., n, k]^T; b may also be a shared [n, k] matrix.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., n] + bias[n]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
/// tanh approximation of GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

template <typename T> Tensor<T> softmax_lastdim(const Tensor<T>& x);

/// Prefix masks for attention scores of shape [B, ..., Tq, Tk].
struct KeyMask {
  /// Valid key count per batch item; empty means all keys are valid.
  std::vector<std::size_t> key_lengths;
  /// Query i may only attend to keys j <= i.
  bool causal = false;

  bool empty() const { return key_lengths.empty() && !causal; }
};

/// Softmax over the last axis with masked keys given probability zero.
template <typename T> Tensor<T> attention_softmax(const Tensor<T>& scores, const KeyMask& mask);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Rows of table[V, D] gathered by ids; output shape is prefix + [D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, const Shape& prefix);

/// Mean token cross-entropy of logits[..., C]; labels equal to -1 are skipped.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T> Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);

template <typename T> Tensor<T> swap_axes(const Tensor<T>& x, std::size_t axis1, std::size_t axis2);
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [B, T, D] -> [B, H, T, D/H]
template <typename T> Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);
/// [B, H, T, d] -> [B, T, H*d]
template <typename T> Tensor<T> merge_heads(const Tensor<T>& x);

template <typename T> Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t start, std::size_t width);

/// Piecewise-linear resampling of x[..., T, D] along the token axis to
/// `out_len` tokens. Tokens sit at positions i/(L-1), where L is the valid
/// length of each leading item (`lengths`, or T when empty).
template <typename T>
Tensor<T> interpolate_tokens(const Tensor<T>& x, std::size_t out_len, std::span<const std::size_t> lengths = {});

/// Repeats x along a new leading axis of size `batch`.
template <typename T> Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch);

/// Per-head convex mix of two [B, H, T, d] tensors with weight sigmoid(lambda[h])
/// on `mem` and 1 - sigmoid(lambda[h]) on `self`.
template <typename T>
Tensor<T> head_mix(const Tensor<T>& mem, const Tensor<T>& self, const Tensor<T>& lambda);

/// Mean over the first lengths[b] tokens of x[B, T, D] -> [B, D].
template <typename T>
Tensor<T> masked_mean_tokens(const Tensor<T>& x, std::span<const std::size_t> lengths);

/// Inverted dropout; p == 0 returns x itself.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

}  // namespace grc::ops
