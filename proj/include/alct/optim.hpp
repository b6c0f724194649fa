#pragma once

// AdamW with decoupled weight decay, a warmup + decay learning-rate schedule
// and global-norm gradient clipping.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "alct/config.hpp"
#include "alct/errors.hpp"
#include "alct/model.hpp"
#include "alct/tensor.hpp"

namespace alct {

/// Linear warmup to `peak`, then cosine/linear decay to min_frac * peak at
/// `total` steps. Steps are 0-based.
struct LrSchedule {
  double peak = 3e-3;
  int warmup_steps = 0;
  int total_steps = 1;
  double min_frac = 0.1;
  DecayShape shape = DecayShape::kCosine;

  static LrSchedule from(const TrainConfig& c) {
    LrSchedule s;
    s.peak = c.lr;
    s.total_steps = std::max(1, c.steps);
    s.warmup_steps = int(std::lround(c.warmup_frac * double(s.total_steps)));
    s.min_frac = c.min_lr_frac;
    s.shape = c.decay;
    return s;
  }

  double operator()(int step) const {
    if (step < warmup_steps) return peak * double(step + 1) / double(warmup_steps);
    if (shape == DecayShape::kConstant) return peak;
    const int span = std::max(1, total_steps - warmup_steps);
    const double progress = std::min(1.0, double(step - warmup_steps) / double(span));
    const double floor = peak * min_frac;
    if (shape == DecayShape::kLinear) return floor + (peak - floor) * (1.0 - progress);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

/// Scales all gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping. max_norm <= 0 disables clipping.
template <class T>
double clip_grad_norm(const std::vector<Parameter<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.var->has_grad()) sq += p.var->grad.template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = T(max_norm / (norm + 1e-12));
    for (const auto& p : params) {
      if (p.var->has_grad()) p.var->grad *= factor;
    }
  }
  return norm;
}

template <class T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
  };

  AdamW(const std::vector<Parameter<T>>& params, Options options) : options_(options) {
    for (const auto& p : params) {
      m_.push_back(Matrix<T>::Zero(p.var->value.rows(), p.var->value.cols()));
      v_.push_back(Matrix<T>::Zero(p.var->value.rows(), p.var->value.cols()));
    }
  }

  /// One update. Parameters without a gradient keep their moments and only
  /// receive weight decay.
  void step(const std::vector<Parameter<T>>& params, double lr) {
    if (params.size() != m_.size()) throw InvalidInput("optimizer was built for a different parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, double(t_));
    const T b1 = T(options_.beta1), b2 = T(options_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].var->value;
      if (params[i].decay && options_.weight_decay > 0.0) w *= T(1.0 - lr * options_.weight_decay);
      if (!params[i].var->has_grad()) continue;
      const auto& g = params[i].var->grad;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      const T step_size = T(lr / bc1);
      const T denom_scale = T(1.0 / std::sqrt(bc2));
      w.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * denom_scale + T(options_.eps));
    }
  }

  long long steps_taken() const { return t_; }
  void set_steps_taken(long long t) { t_ = t; }
  std::vector<Matrix<T>>& first_moments() { return m_; }
  std::vector<Matrix<T>>& second_moments() { return v_; }
  const std::vector<Matrix<T>>& first_moments() const { return m_; }
  const std::vector<Matrix<T>>& second_moments() const { return v_; }

 private:
  Options options_;
  std::vector<Matrix<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace alct
