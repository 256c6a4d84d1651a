#include "grc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "grc/kernels.hpp"

namespace grc::ops {

namespace {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& out, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (T v : out.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
#endif
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t min_rank) {
  if (x.rank() < min_rank) {
    throw DimensionError(std::string(op) + ": need rank >= " + std::to_string(min_rank) + ", got " +
                         to_string(x.shape()));
  }
}

Shape leading(const Shape& s, std::size_t drop) { return Shape(s.begin(), s.end() - static_cast<long>(drop)); }

// Batch layout shared by matmul and matmul_nt.
struct BatchPlan {
  std::size_t batch;
  bool shared_b;
};

template <typename T>
BatchPlan plan_batch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(op, a, 2);
  require_rank(op, b, 2);
  const Shape lead_a = leading(a.shape(), 2);
  if (b.rank() == 2) return {numel(lead_a), true};
  if (leading(b.shape(), 2) != lead_a) shape_error(op, a.shape(), b.shape());
  return {numel(lead_a), false};
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const BatchPlan plan = plan_batch("matmul", a, b);
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) shape_error("matmul", a.shape(), b.shape());
  Shape out_shape = leading(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  kernels::Gemm<T> g;
  g.batch = plan.batch;
  g.m = m, g.n = n, g.k = k;
  g.a = a.data().data(), g.b = b.data().data(), g.c = out.data().data();
  g.stride_a = m * k, g.stride_b = plan.shared_b ? 0 : k * n, g.stride_c = m * n;
  kernels::gemm(g);
  check_finite(out, "matmul");

  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record([a, b, out, plan, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* dc = out.grad().data();
      if (a.requires_grad()) {
        kernels::Gemm<T> ga;
        ga.trans_b = kernels::Trans::Yes;
        ga.batch = plan.batch;
        ga.m = m, ga.n = k, ga.k = n;
        ga.a = dc, ga.b = b.data().data(), ga.c = a.grad().data();
        ga.stride_a = m * n, ga.stride_b = plan.shared_b ? 0 : k * n, ga.stride_c = m * k;
        ga.accumulate = true;
        kernels::gemm(ga);
      }
      if (b.requires_grad()) {
        kernels::Gemm<T> gb;
        gb.trans_a = kernels::Trans::Yes;
        gb.m = k, gb.n = n;
        gb.a = a.data().data(), gb.b = dc, gb.c = b.grad().data();
        gb.accumulate = true;
        if (plan.shared_b) {
          gb.k = plan.batch * m;
        } else {
          gb.batch = plan.batch;
          gb.k = m;
          gb.stride_a = m * k, gb.stride_b = m * n, gb.stride_c = k * n;
        }
        kernels::gemm(gb);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const BatchPlan plan = plan_batch("matmul_nt", a, b);
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-2);
  if (b.dim(-1) != k) shape_error("matmul_nt", a.shape(), b.shape());
  Shape out_shape = leading(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  kernels::Gemm<T> g;
  g.trans_b = kernels::Trans::Yes;
  g.batch = plan.batch;
  g.m = m, g.n = n, g.k = k;
  g.a = a.data().data(), g.b = b.data().data(), g.c = out.data().data();
  g.stride_a = m * k, g.stride_b = plan.shared_b ? 0 : n * k, g.stride_c = m * n;
  kernels::gemm(g);
  check_finite(out, "matmul_nt");

  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record([a, b, out, plan, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* dc = out.grad().data();
      if (a.requires_grad()) {
        kernels::Gemm<T> ga;
        ga.batch = plan.batch;
        ga.m = m, ga.n = k, ga.k = n;
        ga.a = dc, ga.b = b.data().data(), ga.c = a.grad().data();
        ga.stride_a = m * n, ga.stride_b = plan.shared_b ? 0 : n * k, ga.stride_c = m * k;
        ga.accumulate = true;
        kernels::gemm(ga);
      }
      if (b.requires_grad()) {
        kernels::Gemm<T> gb;
        gb.trans_a = kernels::Trans::Yes;
        gb.m = n, gb.n = k;
        gb.a = dc, gb.b = a.data().data(), gb.c = b.grad().data();
        gb.accumulate = true;
        if (plan.shared_b) {
          gb.k = plan.batch * m;
        } else {
          gb.batch = plan.batch;
          gb.k = m;
          gb.stride_a = m * n, gb.stride_b = m * k, gb.stride_c = n * k;
        }
        kernels::gemm(gb);
      }
    });
  }
  return out;
}

namespace {

// out = alpha*a + beta*b elementwise.
template <typename T>
Tensor<T> linear_combine(const char* op, const Tensor<T>& a, const Tensor<T>& b, T alpha, T beta) {
  require_same_shape(op, a, b);
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * x[i] + beta * y[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record([a, b, out, alpha, beta]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return linear_combine("add", a, b, T(1), T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return linear_combine("sub", a, b, T(1), T(-1));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank("add_bias", x, 1);
  const std::size_t n = x.dim(-1);
  if (bias.rank() != 1 || bias.size() != n) shape_error("add_bias", x.shape(), bias.shape());
  Tensor<T> out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + bias[i % n];
  if (tracking({&x, &bias})) {
    out.set_requires_grad(true);
    active_tape()->record([x, bias, out, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + value;
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace {

template <typename T>
T sigmoid_scalar(T v) {
  // Branching keeps exp() from overflowing for large |v|; the clamp keeps
  // saturated values strictly inside (0, 1).
  constexpr T lo = std::numeric_limits<T>::denorm_min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  if (v >= T(0)) return std::min(T(1) / (T(1) + std::exp(-v)), hi);
  const T e = std::exp(v);
  return std::max(e / (T(1) + e), lo);
}

}  // namespace

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_scalar(x[i]);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = T(0.044715);
  Tensor<T> out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = x[i];
    o[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, c, k]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T t = std::tanh(c * (v + k * v * v * v));
        const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> softmax_with_valid(const char* op, const Tensor<T>& x, std::vector<std::size_t> valid) {
  require_rank(op, x, 1);
  const std::size_t cols = x.dim(-1);
  if (cols == 0) throw DimensionError(std::string(op) + ": empty last dimension in " + to_string(x.shape()));
  const std::size_t rows = x.size() / cols;
  Tensor<T> out(x.shape());
  kernels::SoftmaxRows<T> s;
  s.x = x.data().data();
  s.y = out.data().data();
  s.rows = rows, s.cols = cols;
  s.valid = valid;
  kernels::softmax_rows(s);
  check_finite(out, op);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      kernels::SoftmaxRowsBackward<T> b;
      b.y = out.data().data();
      b.dy = out.grad().data();
      b.dx = x.grad().data();
      b.rows = rows, b.cols = cols;
      kernels::softmax_rows_backward(b);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  return softmax_with_valid("softmax_lastdim", x, {});
}

template <typename T>
Tensor<T> attention_softmax(const Tensor<T>& scores, const KeyMask& mask) {
  if (mask.empty()) return softmax_with_valid("attention_softmax", scores, {});
  require_rank("attention_softmax", scores, 3);
  const std::size_t tk = scores.dim(-1);
  const std::size_t tq = scores.dim(-2);
  const std::size_t rows = scores.size() / std::max<std::size_t>(tk, 1);
  const std::size_t batch = scores.dim(0);
  if (!mask.key_lengths.empty() && mask.key_lengths.size() != batch) {
    throw DimensionError("attention_softmax: " + std::to_string(mask.key_lengths.size()) +
                         " key lengths for batch of " + std::to_string(batch));
  }
  const std::size_t per_item = rows / batch;
  std::vector<std::size_t> valid(rows, tk);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.key_lengths.empty()) valid[r] = std::min(valid[r], mask.key_lengths[r / per_item]);
    if (mask.causal) valid[r] = std::min(valid[r], r % tq + 1);
  }
  return softmax_with_valid("attention_softmax", scores, std::move(valid));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank("layer_norm", x, 1);
  const std::size_t cols = x.dim(-1);
  if (gamma.size() != cols || beta.size() != cols) shape_error("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.size() / cols;
  Tensor<T> out(x.shape());
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  kernels::LayerNormRows<T> s;
  s.x = x.data().data();
  s.gamma = gamma.data().data();
  s.beta = beta.data().data();
  s.y = out.data().data();
  s.mean = stats->data();
  s.rstd = stats->data() + rows;
  s.rows = rows, s.cols = cols, s.eps = eps;
  kernels::layer_norm_rows(s);
  check_finite(out, "layer_norm");
  if (tracking({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    active_tape()->record([x, gamma, beta, out, stats, rows, cols]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> scratch;
      kernels::LayerNormRowsBackward<T> b;
      b.x = x.data().data();
      b.gamma = gamma.data().data();
      b.mean = stats->data();
      b.rstd = stats->data() + rows;
      b.dy = out.grad().data();
      if (x.requires_grad()) {
        b.dx = x.grad().data();
      } else {
        scratch.assign(x.size(), T(0));
        b.dx = scratch.data();
      }
      b.dgamma = gamma.requires_grad() ? gamma.grad().data() : nullptr;
      b.dbeta = beta.requires_grad() ? beta.grad().data() : nullptr;
      b.rows = rows, b.cols = cols;
      kernels::layer_norm_rows_backward(b);
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, const Shape& prefix) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, D], got " + to_string(table.shape()));
  if (numel(prefix) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for prefix " + to_string(prefix));
  }
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape shape = prefix;
  shape.push_back(width);
  Tensor<T> out(shape);
  auto o = out.data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(t.begin() + static_cast<long>(ids[i] * width), width, o.begin() + static_cast<long>(i * width));
  }
  if (tracking({&table})) {
    out.set_requires_grad(true);
    std::vector<int> kept(ids.begin(), ids.end());
    active_tape()->record([table, out, kept = std::move(kept), width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(kept[i]) * width;
        for (std::size_t j = 0; j < width; ++j) gt[row + j] += g[i * width + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 1);
  const std::size_t classes = logits.dim(-1);
  const std::size_t rows = logits.size() / classes;
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data().data() + r * classes;
    T* p = probs->data() + r * classes;
    T mx = *std::max_element(x, x + classes);
    T sum = T(0);
    for (std::size_t j = 0; j < classes; ++j) {
      p[j] = std::exp(x[j] - mx);
      sum += p[j];
    }
    for (std::size_t j = 0; j < classes; ++j) p[j] /= sum;
    const int label = labels[r];
    if (label == -1) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("label " + std::to_string(label) + " outside " + std::to_string(classes) + " classes");
    }
    total += static_cast<double>(mx + std::log(sum) - x[label]);
    ++counted;
  }
  Tensor<T> out = Tensor<T>::scalar(counted ? static_cast<T>(total / static_cast<double>(counted)) : T(0));
  if (counted && tracking({&logits})) {
    out.set_requires_grad(true);
    std::vector<int> kept(labels.begin(), labels.end());
    active_tape()->record([logits, out, probs, kept = std::move(kept), classes, counted]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(counted);
      auto gl = logits.grad();
      for (std::size_t r = 0; r < kept.size(); ++r) {
        if (kept[r] == -1) continue;
        for (std::size_t j = 0; j < classes; ++j) {
          const T onehot = static_cast<std::size_t>(kept[r]) == j ? T(1) : T(0);
          gl[r * classes + j] += g * ((*probs)[r * classes + j] - onehot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean_axis: axis " + std::to_string(axis) + " for " + to_string(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  if (len == 0) throw DimensionError("mean_axis over empty axis of " + to_string(s));
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  Tensor<T> out(out_shape);
  auto o = out.data();
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t p = 0; p < outer; ++p) {
    for (std::size_t a = 0; a < len; ++a) {
      const T* src = x.data().data() + (p * len + a) * inner;
      T* dst = o.data() + p * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) o[p * inner + i] *= inv;
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, outer, len, inner, inv]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t p = 0; p < outer; ++p)
        for (std::size_t a = 0; a < len; ++a)
          for (std::size_t i = 0; i < inner; ++i) gx[(p * len + a) * inner + i] += g[p * inner + i] * inv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& v : x.grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean_all of empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

namespace {

// [P, A, M, Q, I] -> [P, Q, M, A, I]
struct SwapPlan {
  std::size_t p, a, m, q, i;
};

template <typename T>
void swap_copy(const SwapPlan& s, const T* src, T* dst, bool accumulate) {
  for (std::size_t p = 0; p < s.p; ++p)
    for (std::size_t a = 0; a < s.a; ++a)
      for (std::size_t m = 0; m < s.m; ++m)
        for (std::size_t q = 0; q < s.q; ++q) {
          const T* from = src + (((p * s.a + a) * s.m + m) * s.q + q) * s.i;
          T* to = dst + (((p * s.q + q) * s.m + m) * s.a + a) * s.i;
          if (accumulate) {
            for (std::size_t i = 0; i < s.i; ++i) to[i] += from[i];
          } else {
            std::copy_n(from, s.i, to);
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> swap_axes(const Tensor<T>& x, std::size_t axis1, std::size_t axis2) {
  if (axis1 > axis2) std::swap(axis1, axis2);
  if (axis2 >= x.rank()) throw DimensionError("swap_axes: axis out of range for " + to_string(x.shape()));
  if (axis1 == axis2) return x;
  const Shape& s = x.shape();
  SwapPlan plan{1, s[axis1], 1, s[axis2], 1};
  for (std::size_t i = 0; i < axis1; ++i) plan.p *= s[i];
  for (std::size_t i = axis1 + 1; i < axis2; ++i) plan.m *= s[i];
  for (std::size_t i = axis2 + 1; i < s.size(); ++i) plan.i *= s[i];
  Shape out_shape = s;
  std::swap(out_shape[axis1], out_shape[axis2]);
  Tensor<T> out(out_shape);
  swap_copy(plan, x.data().data(), out.data().data(), false);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, plan]() mutable {
      if (!out.has_grad()) return;
      const SwapPlan back{plan.p, plan.q, plan.m, plan.a, plan.i};
      swap_copy(back, out.grad().data(), x.grad().data(), true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  require_rank("transpose_last2", x, 2);
  return swap_axes(x, x.rank() - 2, x.rank() - 1);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + to_string(x.shape()) + " into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2) / heads;
  return swap_axes(reshape(x, {b, t, heads, d}), 1, 2);
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: expected [B,H,T,d], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), d = x.dim(3);
  return reshape(swap_axes(x, 1, 2), {b, t, h * d});
}

template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("concat_lastdim", a, 1);
  require_rank("concat_lastdim", b, 1);
  if (leading(a.shape(), 1) != leading(b.shape(), 1)) shape_error("concat_lastdim", a.shape(), b.shape());
  const std::size_t da = a.dim(-1), db = b.dim(-1), rows = numel(leading(a.shape(), 1));
  Shape shape = leading(a.shape(), 1);
  shape.push_back(da + db);
  Tensor<T> out(shape);
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * da, da, o.data() + r * (da + db));
    std::copy_n(b.data().data() + r * db, db, o.data() + r * (da + db) + da);
  }
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record([a, b, out, rows, da, db]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < da; ++j) ga[r * da + j] += g[r * (da + db) + j];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < db; ++j) gb[r * db + j] += g[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t start, std::size_t width) {
  require_rank("slice_lastdim", x, 1);
  const std::size_t d = x.dim(-1);
  if (start + width > d) {
    throw DimensionError("slice_lastdim: [" + std::to_string(start) + ", " + std::to_string(start + width) +
                         ") out of range for " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / std::max<std::size_t>(d, 1);
  Shape shape = leading(x.shape(), 1);
  shape.push_back(width);
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * d + start, width, out.data().data() + r * width);
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, rows, d, start, width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) gx[r * d + start + j] += g[r * width + j];
    });
  }
  return out;
}

namespace {

struct InterpTap {
  std::size_t lo, hi;
  double w;  // weight on hi
};

}  // namespace

template <typename T>
Tensor<T> interpolate_tokens(const Tensor<T>& x, std::size_t out_len, std::span<const std::size_t> lengths) {
  require_rank("interpolate_tokens", x, 2);
  if (out_len == 0) throw DimensionError("interpolate_tokens: output length must be >= 1");
  const std::size_t len = x.dim(-2), d = x.dim(-1);
  if (len == 0) throw DimensionError("interpolate_tokens: empty token axis in " + to_string(x.shape()));
  const std::size_t items = x.size() / (len * std::max<std::size_t>(d, 1));
  if (!lengths.empty() && lengths.size() != items) {
    throw DimensionError("interpolate_tokens: " + std::to_string(lengths.size()) + " lengths for " +
                         std::to_string(items) + " items");
  }
  std::vector<InterpTap> taps(items * out_len);
  for (std::size_t b = 0; b < items; ++b) {
    const std::size_t valid = lengths.empty() ? len : lengths[b];
    if (valid == 0 || valid > len) {
      throw DimensionError("interpolate_tokens: valid length " + std::to_string(valid) + " outside [1, " +
                           std::to_string(len) + "]");
    }
    for (std::size_t j = 0; j < out_len; ++j) {
      InterpTap tap{0, 0, 0.0};
      if (valid > 1 && out_len > 1) {
        // Exact rational position, so valid == out_len gives integer taps.
        const std::size_t num = j * (valid - 1);
        tap.lo = num / (out_len - 1);
        const std::size_t rem = num % (out_len - 1);
        tap.hi = std::min(tap.lo + 1, valid - 1);
        tap.w = static_cast<double>(rem) / static_cast<double>(out_len - 1);
      }
      taps[b * out_len + j] = tap;
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_len;
  Tensor<T> out(shape);
  auto o = out.data();
  for (std::size_t b = 0; b < items; ++b) {
    const T* src = x.data().data() + b * len * d;
    for (std::size_t j = 0; j < out_len; ++j) {
      const InterpTap& tap = taps[b * out_len + j];
      T* dst = o.data() + (b * out_len + j) * d;
      if (tap.w == 0.0) {
        std::copy_n(src + tap.lo * d, d, dst);
        continue;
      }
      const T w = static_cast<T>(tap.w);
      for (std::size_t c = 0; c < d; ++c) dst[c] = (T(1) - w) * src[tap.lo * d + c] + w * src[tap.hi * d + c];
    }
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, taps = std::move(taps), items, out_len, len, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t b = 0; b < items; ++b)
        for (std::size_t j = 0; j < out_len; ++j) {
          const InterpTap& tap = taps[b * out_len + j];
          const T w = static_cast<T>(tap.w);
          const T* src = g.data() + (b * out_len + j) * d;
          for (std::size_t c = 0; c < d; ++c) {
            gx[(b * len + tap.lo) * d + c] += (T(1) - w) * src[c];
            if (tap.w != 0.0) gx[(b * len + tap.hi) * d + c] += w * src[c];
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch) {
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  Tensor<T> out(shape);
  const std::size_t n = x.size();
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.data().data(), n, out.data().data() + b * n);
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, batch, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[b * n + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> head_mix(const Tensor<T>& mem, const Tensor<T>& self, const Tensor<T>& lambda) {
  require_same_shape("head_mix", mem, self);
  if (mem.rank() != 4 || lambda.rank() != 1 || lambda.size() != mem.dim(1)) {
    shape_error("head_mix", mem.shape(), lambda.shape());
  }
  const std::size_t batch = mem.dim(0), heads = mem.dim(1), per_head = mem.dim(2) * mem.dim(3);
  std::vector<T> ratio(heads);
  for (std::size_t h = 0; h < heads; ++h) ratio[h] = sigmoid_scalar(lambda[h]);
  Tensor<T> out(mem.shape());
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (b * heads + h) * per_head;
      const T s = ratio[h];
      for (std::size_t i = 0; i < per_head; ++i) o[base + i] = s * mem[base + i] + (T(1) - s) * self[base + i];
    }
  if (tracking({&mem, &self, &lambda})) {
    out.set_requires_grad(true);
    active_tape()->record([mem, self, lambda, out, ratio = std::move(ratio), batch, heads, per_head]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      const bool want_m = mem.requires_grad(), want_s = self.requires_grad(), want_l = lambda.requires_grad();
      std::span<T> gm, gs, gl;
      if (want_m) gm = mem.grad();
      if (want_s) gs = self.grad();
      if (want_l) gl = lambda.grad();
      const auto md = mem.data(), sd = self.data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (b * heads + h) * per_head;
          const T s = ratio[h];
          if (want_m)
            for (std::size_t i = 0; i < per_head; ++i) gm[base + i] += s * g[base + i];
          if (want_s)
            for (std::size_t i = 0; i < per_head; ++i) gs[base + i] += (T(1) - s) * g[base + i];
          if (want_l) {
            T acc = T(0);
            for (std::size_t i = 0; i < per_head; ++i) acc += g[base + i] * (md[base + i] - sd[base + i]);
            gl[h] += acc * s * (T(1) - s);
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_mean_tokens(const Tensor<T>& x, std::span<const std::size_t> lengths) {
  if (x.rank() != 3) throw DimensionError("masked_mean_tokens: expected [B,T,D], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  std::vector<std::size_t> valid(batch, len);
  if (!lengths.empty()) {
    if (lengths.size() != batch) throw DimensionError("masked_mean_tokens: lengths/batch mismatch");
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] == 0 || lengths[b] > len) throw DimensionError("masked_mean_tokens: bad valid length");
      valid[b] = lengths[b];
    }
  }
  Tensor<T> out({batch, d});
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < valid[b]; ++t)
      for (std::size_t c = 0; c < d; ++c) o[b * d + c] += x[(b * len + t) * d + c];
    const T inv = T(1) / static_cast<T>(valid[b]);
    for (std::size_t c = 0; c < d; ++c) o[b * d + c] *= inv;
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, valid = std::move(valid), batch, len, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T inv = T(1) / static_cast<T>(valid[b]);
        for (std::size_t t = 0; t < valid[b]; ++t)
          for (std::size_t c = 0; c < d; ++c) gx[(b * len + t) * d + c] += g[b * d + c] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = x[i] * (*mask)[i];
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record([x, out, mask]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

#define GRC_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                               \
  template Tensor<T> attention_softmax(const Tensor<T>&, const KeyMask&);                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>, const Shape&);                 \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                           \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> sum_all(const Tensor<T>&);                                                       \
  template Tensor<T> mean_all(const Tensor<T>&);                                                      \
  template Tensor<T> swap_axes(const Tensor<T>&, std::size_t, std::size_t);                           \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> merge_heads(const Tensor<T>&);                                                   \
  template Tensor<T> concat_lastdim(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> slice_lastdim(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> interpolate_tokens(const Tensor<T>&, std::size_t, std::span<const std::size_t>); \
  template Tensor<T> broadcast_batch(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> head_mix(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> masked_mean_tokens(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);

GRC_INSTANTIATE_OPS(float)
GRC_INSTANTIATE_OPS(double)

#undef GRC_INSTANTIATE_OPS

}  // namespace grc::ops
