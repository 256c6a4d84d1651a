#include "grc/attention.hpp"

#include <cmath>

#include "grc/random.hpp"

namespace grc {

void AttentionDims::validate() const {
  if (d_model == 0 || heads == 0) throw ConfigError("attention needs d_model >= 1 and heads >= 1");
  if (d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (!use_cache) return;
  if (cache_len == 0) throw ConfigError("cache_len must be >= 1");
  if (bptt_steps == 0) throw ConfigError("bptt_steps must be >= 1");
  const std::size_t width = cache_width();
  if (width % heads != 0) {
    throw ConfigError("cache width round(r*D) = " + std::to_string(width) + " (r = " + std::to_string(ratio) +
                      ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
}

template <typename T>
Linear<T> Linear<T>::make(std::size_t in, std::size_t out, bool bias, std::uint64_t seed) {
  Linear<T> l;
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = Tensor<T>({in, out});
  for (T& v : l.weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  l.weight.set_requires_grad(true);
  l.has_bias = bias;
  l.bias = Tensor<T>({bias ? out : 0});
  l.bias.set_requires_grad(bias);
  return l;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> y = ops::matmul(x, weight);
  return has_bias ? ops::add_bias(y, bias) : y;
}

template <typename T>
void Linear<T>::append_parameters(std::vector<NamedTensor<T>>& out, const std::string& name) const {
  out.push_back({name + ".weight", weight, true});
  if (has_bias) out.push_back({name + ".bias", bias, false});
}

template <typename T>
GrcAttention<T>::GrcAttention(const AttentionDims& dims, std::uint64_t seed, std::string name)
    : dims_(dims), name_(std::move(name)) {
  dims_.validate();
  const std::size_t d = dims_.d_model;
  auto seed_for = [&](const char* part) { return derive_seed(seed, name_ + "." + part); };
  q_ = Linear<T>::make(d, d, true, seed_for("q"));
  k_ = Linear<T>::make(d, d, false, seed_for("k"));
  v_ = Linear<T>::make(d, d, true, seed_for("v"));
  o_ = Linear<T>::make(d, d, true, seed_for("o"));
  if (!dims_.use_cache) return;
  const std::size_t dm = dims_.cache_width();
  qm_ = Linear<T>::make(dm, dm, true, seed_for("mem_q"));
  km_ = Linear<T>::make(dm, dm, false, seed_for("mem_k"));
  vm_ = Linear<T>::make(dm, d, true, seed_for("mem_v"));
  lambda_ = Tensor<T>({dims_.heads});
  lambda_.set_requires_grad(true);
  cache_ = std::make_unique<GrcCache<T>>(dims_.cache_len, dm, dims_.ratio, seed, name_ + ".cache", dims_.bptt_steps);
}

template <typename T>
Tensor<T> GrcAttention<T>::self_scores(const Tensor<T>& x, Tensor<T>& values) const {
  if (x.rank() != 3 || x.dim(2) != dims_.d_model) {
    throw DimensionError("attention input must be [B, T, " + std::to_string(dims_.d_model) + "], got " +
                         to_string(x.shape()));
  }
  if (x.dim(1) == 0) throw DimensionError("attention input has no tokens");
  const std::size_t h = dims_.heads;
  const Tensor<T> q = ops::split_heads(q_(x), h);
  const Tensor<T> k = ops::split_heads(k_(x), h);
  values = ops::split_heads(v_(x), h);
  const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dims_.d_model / h)));
  return ops::scale(ops::matmul_nt(q, k), inv);
}

template <typename T>
Tensor<T> GrcAttention<T>::cached_scores(const Tensor<T>& xbar, const Tensor<T>& cache, Tensor<T>& values) const {
  if (!cache_) throw StateError("layer '" + name_ + "' has no cache");
  const std::size_t dm = cache_->width();
  if (xbar.rank() != 3 || xbar.dim(2) != dm) {
    throw DimensionError("cached attention queries must be [B, T, " + std::to_string(dm) + "], got " +
                         to_string(xbar.shape()));
  }
  if (cache.shape() != Shape{cache_->length(), dm}) {
    throw DimensionError("cached attention over " + to_string(cache.shape()) + ", expected " +
                         to_string({cache_->length(), dm}));
  }
  const std::size_t h = dims_.heads;
  const std::size_t batch = xbar.dim(0);
  const Tensor<T> q = ops::split_heads(qm_(xbar), h);
  const Tensor<T> k = ops::split_heads(ops::broadcast_batch(km_(cache), batch), h);
  values = ops::split_heads(ops::broadcast_batch(vm_(cache), batch), h);
  const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dm / h)));
  return ops::scale(ops::matmul_nt(q, k), inv);
}

template <typename T>
Tensor<T> GrcAttention<T>::self_heads(const Tensor<T>& x, const ops::KeyMask& mask) const {
  Tensor<T> v;
  const Tensor<T> scores = self_scores(x, v);
  return ops::matmul(ops::attention_softmax(scores, mask), v);
}

template <typename T>
Tensor<T> GrcAttention<T>::cached_heads(const Tensor<T>& xbar, const Tensor<T>& cache) const {
  Tensor<T> v;
  const Tensor<T> scores = cached_scores(xbar, cache, v);
  return ops::matmul(ops::softmax_lastdim(scores), v);
}

template <typename T>
Tensor<T> GrcAttention<T>::self_attention(const Tensor<T>& x, const ops::KeyMask& mask) const {
  return ops::merge_heads(self_heads(x, mask));
}

template <typename T>
Tensor<T> GrcAttention<T>::cached_attention(const Tensor<T>& xbar, const Tensor<T>& cache) const {
  return ops::merge_heads(cached_heads(xbar, cache));
}

template <typename T>
Tensor<T> GrcAttention<T>::self_probs(const Tensor<T>& x, const ops::KeyMask& mask) const {
  Tensor<T> v;
  return ops::attention_softmax(self_scores(x, v), mask);
}

template <typename T>
Tensor<T> GrcAttention<T>::cached_probs(const Tensor<T>& xbar, const Tensor<T>& cache) const {
  Tensor<T> v;
  return ops::softmax_lastdim(cached_scores(xbar, cache, v));
}

template <typename T>
Tensor<T> GrcAttention<T>::forward(const Tensor<T>& x, bool training, const ops::KeyMask& mask) {
  if (!cache_) return o_(self_attention(x, mask));

  const Tensor<T> xbar = slice_channels(x, dims_.ratio);
  Tensor<T> memory;
  if (training) {
    memory = cache_->update(token_interpolate(xbar, cache_->length(), mask.key_lengths));
  } else {
    memory = cache_->state();
  }
  const Tensor<T> self = self_heads(x, mask);
  const Tensor<T> mem = cached_heads(xbar, memory);
  return o_(ops::merge_heads(ops::head_mix(mem, self, lambda_)));
}

template <typename T>
std::vector<double> GrcAttention<T>::mixing_ratios() const {
  std::vector<double> out;
  if (!cache_) return out;
  for (T l : lambda_.data()) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(l))));
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> GrcAttention<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  q_.append_parameters(out, name_ + ".q");
  k_.append_parameters(out, name_ + ".k");
  v_.append_parameters(out, name_ + ".v");
  o_.append_parameters(out, name_ + ".o");
  if (!cache_) return out;
  qm_.append_parameters(out, name_ + ".mem_q");
  km_.append_parameters(out, name_ + ".mem_k");
  vm_.append_parameters(out, name_ + ".mem_v");
  out.push_back({name_ + ".lambda", lambda_, false});
  for (auto& p : cache_->parameters()) out.push_back(std::move(p));
  return out;
}

template struct Linear<float>;
template struct Linear<double>;
template class GrcAttention<float>;
template class GrcAttention<double>;

}  // namespace grc
