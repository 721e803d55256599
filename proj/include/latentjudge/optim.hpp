#pragma once

#include <vector>

#include "latentjudge/tensor.hpp"

namespace lj {

// First-order adaptive-moment optimizer with bias correction. Parameters with
// requires_grad == false (or no populated grad) are left untouched.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      slots_[i].m.assign(static_cast<std::size_t>(params_[i].size()), 0.0);
      slots_[i].v.assign(static_cast<std::size_t>(params_[i].size()), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      auto& val = p.values();
      auto& g = p.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double learning_rate() const { return lr_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace lj
