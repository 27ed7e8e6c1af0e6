#pragma once

// Adam over a fixed list of named parameters.

#include <cmath>
#include <vector>

#include "modsynth/networks.hpp"

namespace modsynth {

struct AdamOptions {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// One bias-corrected update at learning rate `lr`. A zero rate leaves the
  /// parameters bit-identical (moments still advance).
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& var = params_[k].var;
      const Tensor<T>& g = var.grad();
      Tensor<T>& w = var.mutable_value();
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        if (lr == 0.0) continue;
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const AdamOptions& options() const { return opt_; }
  const ParamList<T>& parameters() const { return params_; }

 private:
  ParamList<T> params_;
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace modsynth
