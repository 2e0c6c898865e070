#pragma once

#include "h2rec/autodiff.hpp"

#include <cmath>
#include <vector>

namespace h2rec {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

/// Adaptive moment estimation over every parameter in a ParamStore.
template <typename S>
class Adam {
 public:
  Adam(ParamStore<S>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& v = params[i].value;
      m_.push_back(Mat<S>::Zero(v.rows(), v.cols()));
      v_.push_back(Mat<S>::Zero(v.rows(), v.cols()));
    }
  }

  /// Applies one update from the accumulated gradients. Returns the global
  /// gradient norm before clipping.
  double step() {
    double sq = 0.0;
    for (std::size_t i = 0; i < params_->size(); ++i) {
      sq += static_cast<double>((*params_)[i].grad.squaredNorm());
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S step = static_cast<S>(cfg_.lr / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(cfg_.eps);
    const S c = static_cast<S>(clip);
    for (std::size_t i = 0; i < params_->size(); ++i) {
      auto& p = (*params_)[i];
      auto g = (p.grad.array() * c).eval();
      m_[i].array() = b1 * m_[i].array() + (S(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (S(1) - b2) * g.square();
      p.value.array() -= step * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
    return norm;
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  std::vector<Mat<S>>& first_moments() { return m_; }
  std::vector<Mat<S>>& second_moments() { return v_; }
  const std::vector<Mat<S>>& first_moments() const { return m_; }
  const std::vector<Mat<S>>& second_moments() const { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamStore<S>* params_;
  AdamConfig cfg_;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
  long long t_ = 0;
};

}  // namespace h2rec
