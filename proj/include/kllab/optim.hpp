#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace kllab {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
  double grad_clip = 1.0;     // global L2 norm, <= 0 disables
};

template <class T>
double global_norm(std::span<const T> g) {
  double s = 0.0;
  for (T v : g) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// Adam with bias correction and optional global-norm clipping. State is kept
// in double so long runs are insensitive to the parameter precision.
template <class T>
class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  // Returns the pre-clipping gradient norm.
  double step(std::span<T> params, std::span<const T> grad, double lr) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw std::invalid_argument("Adam: parameter/gradient size mismatch");
    const double norm = global_norm(grad);
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]) * clip;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      double p = static_cast<double>(params[i]);
      if (cfg_.weight_decay > 0.0) p -= lr * cfg_.weight_decay * p;
      p -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
      params[i] = static_cast<T>(p);
    }
    return norm;
  }

  double step(std::span<T> params, std::span<const T> grad) {
    return step(params, grad, cfg_.learning_rate);
  }

  const AdamConfig& config() const { return cfg_; }
  long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace kllab
