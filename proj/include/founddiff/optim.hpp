#pragma once

#include <cmath>
#include <vector>

#include "founddiff/tensor.hpp"

namespace founddiff {

inline double cosine_lr(double lr0, double lr_end, int step, int total_steps) {
  if (total_steps <= 1) return lr_end;
  const double t = static_cast<double>(step) / (total_steps - 1);
  return lr_end + 0.5 * (lr0 - lr_end) * (1.0 + std::cos(3.14159265358979323846 * t));
}

class SgdMomentum {
 public:
  SgdMomentum(std::vector<numcore::Tensor> params, double momentum)
      : params_(std::move(params)), momentum_(momentum) {
    for (auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& v = velocity_[i];
      auto& val = params_[i].raw_values();
      auto& g = params_[i].raw_grad();
      for (std::size_t k = 0; k < val.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        val[k] -= lr * v[k];
      }
    }
  }

 private:
  std::vector<numcore::Tensor> params_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

class Adam {
 public:
  Adam(std::vector<numcore::Tensor> params, double beta1 = 0.9,
       double beta2 = 0.99, double weight_decay = 1e-9, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2),
        weight_decay_(weight_decay), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& val = params_[i].raw_values();
      auto& g = params_[i].raw_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < val.size(); ++k) {
        const double grad = g[k] + weight_decay_ * val[k];
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * grad;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad * grad;
        val[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
    }
  }

 private:
  std::vector<numcore::Tensor> params_;
  double beta1_, beta2_, weight_decay_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace founddiff
