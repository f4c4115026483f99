#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "l2v/tensor.hpp"

namespace l2v {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double.
template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// One update with learning rate `lr`. Parameters without a grad are skipped.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<Tensor<T>>& params() const noexcept { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup to `peak` over `warmup` steps, then constant.
inline double warmup_lr(double peak, std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return peak;
  return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

}  // namespace l2v
