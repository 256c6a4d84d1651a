#include "grc/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>

#ifdef GRC_HAVE_OPENMP
#include <omp.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace grc::kernels {

void keep_heap_resident() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

namespace {

#ifdef GRC_HAVE_OPENMP
std::atomic<Backend> selected{Backend::Parallel};
#else
std::atomic<Backend> selected{Backend::Serial};
#endif

// Row bodies shared by both backends. Each computes one output row with a
// fixed reduction order.

constexpr std::size_t kGemmRowBlock = 4;

// Up to kGemmRowBlock consecutive rows of one batch item. Every output
// element is still a sum over ascending p, so the blocking never changes
// results; it only lets a row of B be reused across the block.
template <typename T>
inline void gemm_block(const Gemm<T>& g, std::size_t block) {
  const std::size_t m = g.m, n = g.n, k = g.k;
  const std::size_t per_item = (m + kGemmRowBlock - 1) / kGemmRowBlock;
  const std::size_t bi = block / per_item;
  const std::size_t i0 = (block % per_item) * kGemmRowBlock;
  const std::size_t rows = std::min(kGemmRowBlock, m - i0);
  const T* a = g.a + bi * g.stride_a;
  const T* b = g.b + bi * g.stride_b;
  T* c = g.c + bi * g.stride_c;
  auto a_at = [&](std::size_t i, std::size_t p) { return g.trans_a == Trans::No ? a[i * k + p] : a[p * m + i]; };

  if (g.trans_b == Trans::No) {
    if (!g.accumulate) std::fill(c + i0 * n, c + (i0 + rows) * n, T(0));
    if (rows == kGemmRowBlock) {
      T* c0 = c + i0 * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a_at(i0, p), a1 = a_at(i0 + 1, p), a2 = a_at(i0 + 2, p), a3 = a_at(i0 + 3, p);
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
      return;
    }
    for (std::size_t i = i0; i < i0 + rows; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a_at(i, p);
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }

  // Transposed B: four output columns at a time with independent
  // accumulators, each summed in ascending p.
  for (std::size_t i = i0; i < i0 + rows; ++i) {
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const T* b0 = b + j * k;
      const T* b1 = b0 + k;
      const T* b2 = b1 + k;
      const T* b3 = b2 + k;
      T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a_at(i, p);
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      if (g.accumulate) {
        crow[j] += s0;
        crow[j + 1] += s1;
        crow[j + 2] += s2;
        crow[j + 3] += s3;
      } else {
        crow[j] = s0;
        crow[j + 1] = s1;
        crow[j + 2] = s2;
        crow[j + 3] = s3;
      }
    }
    for (; j < n; ++j) {
      const T* brow = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += a_at(i, p) * brow[p];
      crow[j] = g.accumulate ? crow[j] + s : s;
    }
  }
}

template <typename T>
std::size_t gemm_blocks(const Gemm<T>& g) {
  return g.batch * ((g.m + kGemmRowBlock - 1) / kGemmRowBlock);
}

template <typename T>
inline void softmax_row(const SoftmaxRows<T>& s, std::size_t r) {
  const T* x = s.x + r * s.cols;
  T* y = s.y + r * s.cols;
  const std::size_t v = s.valid.empty() ? s.cols : std::min(s.valid[r], s.cols);
  std::fill(y + v, y + s.cols, T(0));
  if (v == 0) return;
  T mx = x[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < v; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < v; ++j) y[j] *= inv;
}

template <typename T>
inline void softmax_backward_row(const SoftmaxRowsBackward<T>& s, std::size_t r) {
  const T* y = s.y + r * s.cols;
  const T* dy = s.dy + r * s.cols;
  T* dx = s.dx + r * s.cols;
  T dot = T(0);
  for (std::size_t j = 0; j < s.cols; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < s.cols; ++j) dx[j] += y[j] * (dy[j] - dot);
}

template <typename T>
inline void layer_norm_row(const LayerNormRows<T>& s, std::size_t r) {
  const T* x = s.x + r * s.cols;
  T* y = s.y + r * s.cols;
  T mean = T(0);
  for (std::size_t j = 0; j < s.cols; ++j) mean += x[j];
  mean /= static_cast<T>(s.cols);
  T var = T(0);
  for (std::size_t j = 0; j < s.cols; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<T>(s.cols);
  const T rstd = T(1) / std::sqrt(var + s.eps);
  for (std::size_t j = 0; j < s.cols; ++j) y[j] = (x[j] - mean) * rstd * s.gamma[j] + s.beta[j];
  s.mean[r] = mean;
  s.rstd[r] = rstd;
}

template <typename T>
inline void layer_norm_backward_row(const LayerNormRowsBackward<T>& s, std::size_t r) {
  const T* x = s.x + r * s.cols;
  const T* dy = s.dy + r * s.cols;
  T* dx = s.dx + r * s.cols;
  const T mean = s.mean[r];
  const T rstd = s.rstd[r];
  T sum_g = T(0), sum_gx = T(0);
  for (std::size_t j = 0; j < s.cols; ++j) {
    const T g = dy[j] * s.gamma[j];
    sum_g += g;
    sum_gx += g * (x[j] - mean) * rstd;
  }
  const T inv_n = T(1) / static_cast<T>(s.cols);
  for (std::size_t j = 0; j < s.cols; ++j) {
    const T xhat = (x[j] - mean) * rstd;
    const T g = dy[j] * s.gamma[j];
    dx[j] += rstd * (g - sum_g * inv_n - xhat * sum_gx * inv_n);
  }
}

template <typename T>
void layer_norm_param_grads(const LayerNormRowsBackward<T>& s) {
  if (!s.dgamma && !s.dbeta) return;
  for (std::size_t r = 0; r < s.rows; ++r) {
    const T* x = s.x + r * s.cols;
    const T* dy = s.dy + r * s.cols;
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (s.dgamma) s.dgamma[j] += dy[j] * (x[j] - s.mean[r]) * s.rstd[r];
      if (s.dbeta) s.dbeta[j] += dy[j];
    }
  }
}

}  // namespace

bool parallel_available() {
#ifdef GRC_HAVE_OPENMP
  return true;
#else
  return false;
#endif
}

void set_backend(Backend b) {
  selected.store(parallel_available() ? b : Backend::Serial);
}

Backend backend() { return selected.load(); }

void set_num_threads([[maybe_unused]] int threads) {
#ifdef GRC_HAVE_OPENMP
  if (threads > 0) omp_set_num_threads(threads);
  else omp_set_num_threads(omp_get_num_procs());
#endif
}

namespace serial {

template <typename T>
void gemm(const Gemm<T>& g) {
  const std::size_t blocks = gemm_blocks(g);
  for (std::size_t r = 0; r < blocks; ++r) gemm_block(g, r);
}

template <typename T>
void softmax_rows(const SoftmaxRows<T>& s) {
  for (std::size_t r = 0; r < s.rows; ++r) softmax_row(s, r);
}

template <typename T>
void softmax_rows_backward(const SoftmaxRowsBackward<T>& s) {
  for (std::size_t r = 0; r < s.rows; ++r) softmax_backward_row(s, r);
}

template <typename T>
void layer_norm_rows(const LayerNormRows<T>& s) {
  for (std::size_t r = 0; r < s.rows; ++r) layer_norm_row(s, r);
}

template <typename T>
void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s) {
  for (std::size_t r = 0; r < s.rows; ++r) layer_norm_backward_row(s, r);
  layer_norm_param_grads(s);
}

}  // namespace serial

namespace parallel {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 14;

// With one thread the outlined OpenMP loop is measurably slower than the
// plain loop, so small or single-threaded calls take the serial path.
inline bool worth_threads(std::size_t work) {
#ifdef GRC_HAVE_OPENMP
  return work >= kMinParallelWork && omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}

template <typename T>
void gemm(const Gemm<T>& g) {
  const auto blocks = static_cast<std::int64_t>(gemm_blocks(g));
  if (!worth_threads(g.batch * g.m * g.n * g.k)) return serial::gemm(g);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < blocks; ++r) gemm_block(g, static_cast<std::size_t>(r));
}

template <typename T>
void softmax_rows(const SoftmaxRows<T>& s) {
  const auto rows = static_cast<std::int64_t>(s.rows);
  if (!worth_threads(s.rows * s.cols)) return serial::softmax_rows(s);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) softmax_row(s, static_cast<std::size_t>(r));
}

template <typename T>
void softmax_rows_backward(const SoftmaxRowsBackward<T>& s) {
  const auto rows = static_cast<std::int64_t>(s.rows);
  if (!worth_threads(s.rows * s.cols)) return serial::softmax_rows_backward(s);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) softmax_backward_row(s, static_cast<std::size_t>(r));
}

template <typename T>
void layer_norm_rows(const LayerNormRows<T>& s) {
  const auto rows = static_cast<std::int64_t>(s.rows);
  if (!worth_threads(s.rows * s.cols)) return serial::layer_norm_rows(s);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) layer_norm_row(s, static_cast<std::size_t>(r));
}

template <typename T>
void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s) {
  const auto rows = static_cast<std::int64_t>(s.rows);
  if (!worth_threads(s.rows * s.cols)) return serial::layer_norm_rows_backward(s);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) layer_norm_backward_row(s, static_cast<std::size_t>(r));
  layer_norm_param_grads(s);
}

}  // namespace parallel

template <typename T>
void gemm(const Gemm<T>& g) {
  if (g.batch * g.m * g.n == 0) return;
  backend() == Backend::Parallel ? parallel::gemm(g) : serial::gemm(g);
}

template <typename T>
void softmax_rows(const SoftmaxRows<T>& s) {
  backend() == Backend::Parallel ? parallel::softmax_rows(s) : serial::softmax_rows(s);
}

template <typename T>
void softmax_rows_backward(const SoftmaxRowsBackward<T>& s) {
  backend() == Backend::Parallel ? parallel::softmax_rows_backward(s) : serial::softmax_rows_backward(s);
}

template <typename T>
void layer_norm_rows(const LayerNormRows<T>& s) {
  backend() == Backend::Parallel ? parallel::layer_norm_rows(s) : serial::layer_norm_rows(s);
}

template <typename T>
void layer_norm_rows_backward(const LayerNormRowsBackward<T>& s) {
  backend() == Backend::Parallel ? parallel::layer_norm_rows_backward(s)
                                 : serial::layer_norm_rows_backward(s);
}

#define GRC_INSTANTIATE_KERNELS(NS, T)                                           \
  template void NS::gemm<T>(const Gemm<T>&);                                     \
  template void NS::softmax_rows<T>(const SoftmaxRows<T>&);                      \
  template void NS::softmax_rows_backward<T>(const SoftmaxRowsBackward<T>&);     \
  template void NS::layer_norm_rows<T>(const LayerNormRows<T>&);                 \
  template void NS::layer_norm_rows_backward<T>(const LayerNormRowsBackward<T>&);

GRC_INSTANTIATE_KERNELS(serial, float)
GRC_INSTANTIATE_KERNELS(serial, double)
GRC_INSTANTIATE_KERNELS(parallel, float)
GRC_INSTANTIATE_KERNELS(parallel, double)
template void gemm<float>(const Gemm<float>&);
template void gemm<double>(const Gemm<double>&);
template void softmax_rows<float>(const SoftmaxRows<float>&);
template void softmax_rows<double>(const SoftmaxRows<double>&);
template void softmax_rows_backward<float>(const SoftmaxRowsBackward<float>&);
template void softmax_rows_backward<double>(const SoftmaxRowsBackward<double>&);
template void layer_norm_rows<float>(const LayerNormRows<float>&);
template void layer_norm_rows<double>(const LayerNormRows<double>&);
template void layer_norm_rows_backward<float>(const LayerNormRowsBackward<float>&);
template void layer_norm_rows_backward<double>(const LayerNormRowsBackward<double>&);

#undef GRC_INSTANTIATE_KERNELS

}  // namespace grc::kernels
