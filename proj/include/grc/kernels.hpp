#pragma once

#include <cstddef>
#include <span>

// Dense inner loops used by the differentiable ops.
//
// Every kernel exists twice: a plain serial reference in kernels::serial and
// an OpenMP version in kernels::parallel. Both use the same loop nest and the
// same reduction order per output element, so their results are bitwise
// identical; the parallel version only distributes independent output row blocks.
// The unqualified kernels::* entry points dispatch on the selected backend.

namespace grc::kernels {

enum class Backend { Serial, Parallel };

bool parallel_available();
void set_backend(Backend backend);
Backend backend();
/// Caps OpenMP threads; 0 restores the runtime default.
void set_num_threads(int threads);
/// Stops the allocator from returning large blocks to the OS between
/// steps, which otherwise page-faults every activation buffer afresh.
/// No-op outside glibc.
void keep_heap_resident();

enum class Trans { No, Yes };

/// Batched row-major GEMM: for each of `batch` items,
/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n].
/// Strides are in elements between consecutive batch items; a stride of 0
/// reuses the same matrix for every item.
template <typename T>
struct Gemm {
  Trans trans_a = Trans::No;
  Trans trans_b = Trans::No;
  std::size_t batch = 1;
  std::size_t m = 0, n = 0, k = 0;
  const T* a = nullptr;
  const T* b = nullptr;
  T* c = nullptr;
  std::size_t stride_a = 0, stride_b = 0, stride_c = 0;
  bool accumulate = false;
};

/// Row softmax over `cols`; entries at column >= valid[r] get probability 0.
/// An empty `valid` means every column is valid.
template <typename T>
struct SoftmaxRows {
  const T* x = nullptr;
  T* y = nullptr;
  std::size_t rows = 0, cols = 0;
  std::span<const std::size_t> valid;
};

/// dx += y * (dy - <dy, y>) row by row.
template <typename T>
struct SoftmaxRowsBackward {
  const T* y = nullptr;
  const T* dy = nullptr;
  T* dx = nullptr;
  std::size_t rows = 0, cols = 0;
};

template <typename T>
struct LayerNormRows {
  const T* x = nullptr;
  const T* gamma = nullptr;
  const T* beta = nullptr;
  T* y = nullptr;
  T* mean = nullptr;
  T* rstd = nullptr;
  std::size_t rows = 0, cols = 0;
  T eps = T(1e-5);
};

/// Input adjoint of layer norm; dgamma/dbeta are accumulated serially after
/// the row loop so both backends agree bitwise.
template <typename T>
struct LayerNormRowsBackward {
  const T* x = nullptr;
  const T* gamma = nullptr;
  const T* mean = nullptr;
  const T* rstd = nullptr;
  const T* dy = nullptr;
  T* dx = nullptr;
  T* dgamma = nullptr;
  T* dbeta = nullptr;
  std::size_t rows = 0, cols = 0;
};

namespace serial {
template <typename T> void gemm(const Gemm<T>& g);
template <typename T> void softmax_rows(const SoftmaxRows<T>& s);
template <typename T> void softmax_rows_backward(const SoftmaxRowsBackward<T>& s);
template <typename T> void layer_norm_rows(const LayerNormRows<T>& s);
template <typename T> void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s);
}  // namespace serial

namespace parallel {
template <typename T> void gemm(const Gemm<T>& g);
template <typename T> void softmax_rows(const SoftmaxRows<T>& s);
template <typename T> void softmax_rows_backward(const SoftmaxRowsBackward<T>& s);
template <typename T> void layer_norm_rows(const LayerNormRows<T>& s);
template <typename T> void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s);
}  // namespace parallel

template <typename T> void gemm(const Gemm<T>& g);
template <typename T> void softmax_rows(const SoftmaxRows<T>& s);
template <typename T> void softmax_rows_backward(const SoftmaxRowsBackward<T>& s);
template <typename T> void layer_norm_rows(const LayerNormRows<T>& s);
template <typename T> void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s);

}  // namespace grc::kernels
