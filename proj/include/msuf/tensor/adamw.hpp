#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msuf/tensor/tensor.hpp"

namespace msuf::tensor {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with bias correction and decoupled weight decay:
//   m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    for (const auto& p : params_) {
      if (!p.has_grad()) throw std::logic_error("adamw: parameter '" + p.name() + "' has no gradient");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto theta = params_[k].mutable_data();
      const auto g = params_[k].grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j];
        v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        theta[j] -= opts_.lr * (m_hat / (std::sqrt(v_hat) + opts_.eps) + opts_.weight_decay * theta[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t step_count() const { return steps_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const AdamWOptions& options() const { return opts_; }
  const std::vector<double>& first_moment(std::size_t k) const { return first_[k]; }
  const std::vector<double>& second_moment(std::size_t k) const { return second_[k]; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace msuf::tensor
