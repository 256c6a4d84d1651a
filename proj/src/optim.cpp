#include "grc/optim.hpp"

#include <cmath>

#include "grc/binary_io.hpp"
#include "grc/error.hpp"

namespace grc {

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (cfg_.eps <= 0.0) throw ConfigError("AdamW eps must be positive");
  if (cfg_.weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), T(0));
    v_.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i].tensor;
    if (p.size() == 0) continue;
    const auto g = p.grad();
    auto x = p.data();
    const double decay = params_[i].decay ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double m = b1 * static_cast<double>(m_[i][j]) + (1.0 - b1) * gj;
      const double v = b2 * static_cast<double>(v_[i][j]) + (1.0 - b2) * gj * gj;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      double xj = static_cast<double>(x[j]);
      xj -= decay * xj;
      xj -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      x[j] = static_cast<T>(xj);
    }
  }
}

template <typename T>
void AdamW<T>::save(std::ostream& os) const {
  io::write_u64(os, steps_);
  io::write_u64(os, params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    io::write_u64(os, m_[i].size());
    io::write_values<T>(os, m_[i]);
    io::write_values<T>(os, v_[i]);
  }
}

template <typename T>
void AdamW<T>::load(std::istream& is) {
  steps_ = io::read_u64(is);
  if (io::read_u64(is) != params_.size()) throw IoError("optimizer state has a different parameter count");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (io::read_u64(is) != m_[i].size()) throw IoError("optimizer moment size mismatch for " + params_[i].name);
    io::read_values<T>(is, m_[i]);
    io::read_values<T>(is, v_[i]);
  }
}

double inverse_sqrt_lr(double base, std::size_t warmup, std::size_t step) {
  if (warmup == 0) return base;
  const double s = static_cast<double>(step + 1);
  const double w = static_cast<double>(warmup);
  return s <= w ? base * s / w : base * std::sqrt(w / s);
}

template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      for (T& g : p.tensor.grad()) g *= factor;
    }
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(const std::vector<NamedTensor<float>>&, double);
template double clip_grad_norm(const std::vector<NamedTensor<double>>&, double);

}  // namespace grc
