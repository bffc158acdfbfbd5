#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "shieldbench/rng.hpp"

namespace shieldbench {

/// Sparse input vector: parallel index/value arrays, indices need not be sorted.
struct SparseFeatures {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  void add(std::size_t i, double v) {
    index.push_back(static_cast<std::uint32_t>(i));
    value.push_back(v);
  }
  std::size_t size() const noexcept { return index.size(); }
  void clear() {
    index.clear();
    value.clear();
  }
};

struct NetworkShape {
  std::size_t inputs = 0;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;
  std::size_t actions = 0;

  std::size_t param_count() const {
    return inputs * hidden1 + hidden1 + hidden1 * hidden2 + hidden2 + hidden2 * actions + actions + hidden2 + 1;
  }
  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

/// Two tanh hidden layers shared by a logits head and a scalar value head.
/// All parameters live in one flat vector:
///   W1[inputs][hidden1] b1 W2[hidden1][hidden2] b2 Wp[hidden2][actions] bp Wv[hidden2] bv
class PolicyNetwork {
 public:
  struct Activations {
    std::vector<double> h1;
    std::vector<double> h2;
    std::vector<double> logits;
    double value = 0.0;
  };

  explicit PolicyNetwork(NetworkShape shape) : shape_(shape), params_(shape.param_count(), 0.0) {
    if (shape.inputs == 0 || shape.hidden1 == 0 || shape.hidden2 == 0 || shape.actions < 2) {
      throw std::invalid_argument("network needs inputs, two non-empty hidden layers and >= 2 actions");
    }
    w1_ = 0;
    b1_ = w1_ + shape.inputs * shape.hidden1;
    w2_ = b1_ + shape.hidden1;
    b2_ = w2_ + shape.hidden1 * shape.hidden2;
    wp_ = b2_ + shape.hidden2;
    bp_ = wp_ + shape.hidden2 * shape.actions;
    wv_ = bp_ + shape.actions;
    bv_ = wv_ + shape.hidden2;
  }

  /// `active_inputs` is the typical number of non-zero inputs, used to scale
  /// the first layer.
  void initialize(Rng& rng, std::size_t active_inputs) {
    auto fill = [&](std::size_t offset, std::size_t count, double limit) {
      for (std::size_t i = 0; i < count; ++i) params_[offset + i] = rng.uniform(-limit, limit);
    };
    const double a1 = std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(1, active_inputs)));
    fill(w1_, shape_.inputs * shape_.hidden1, a1);
    fill(w2_, shape_.hidden1 * shape_.hidden2, std::sqrt(6.0 / static_cast<double>(shape_.hidden1 + shape_.hidden2)));
    fill(wp_, shape_.hidden2 * shape_.actions, 0.01 * std::sqrt(6.0 / static_cast<double>(shape_.hidden2 + shape_.actions)));
    fill(wv_, shape_.hidden2, std::sqrt(6.0 / static_cast<double>(shape_.hidden2 + 1)));
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(b1_), params_.begin() + static_cast<std::ptrdiff_t>(w2_), 0.0);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(b2_), params_.begin() + static_cast<std::ptrdiff_t>(wp_), 0.0);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(bp_), params_.begin() + static_cast<std::ptrdiff_t>(wv_), 0.0);
    params_[bv_] = 0.0;
  }

  const NetworkShape& shape() const noexcept { return shape_; }
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  void set_params(std::span<const double> p) {
    if (p.size() != params_.size()) throw std::invalid_argument("parameter vector length mismatch");
    std::copy(p.begin(), p.end(), params_.begin());
  }

  void forward(const SparseFeatures& x, Activations& out) const {
    const auto& s = shape_;
    out.h1.assign(params_.begin() + static_cast<std::ptrdiff_t>(b1_),
                  params_.begin() + static_cast<std::ptrdiff_t>(b1_ + s.hidden1));
    for (std::size_t k = 0; k < x.size(); ++k) {
      const std::size_t i = x.index[k];
      if (i >= s.inputs) throw std::out_of_range("feature index outside network input");
      const double v = x.value[k];
      const double* row = &params_[w1_ + i * s.hidden1];
      for (std::size_t j = 0; j < s.hidden1; ++j) out.h1[j] += v * row[j];
    }
    for (auto& h : out.h1) h = std::tanh(h);

    out.h2.assign(params_.begin() + static_cast<std::ptrdiff_t>(b2_),
                  params_.begin() + static_cast<std::ptrdiff_t>(b2_ + s.hidden2));
    for (std::size_t i = 0; i < s.hidden1; ++i) {
      const double v = out.h1[i];
      const double* row = &params_[w2_ + i * s.hidden2];
      for (std::size_t j = 0; j < s.hidden2; ++j) out.h2[j] += v * row[j];
    }
    for (auto& h : out.h2) h = std::tanh(h);

    out.logits.assign(params_.begin() + static_cast<std::ptrdiff_t>(bp_),
                      params_.begin() + static_cast<std::ptrdiff_t>(bp_ + s.actions));
    out.value = params_[bv_];
    for (std::size_t i = 0; i < s.hidden2; ++i) {
      const double v = out.h2[i];
      const double* row = &params_[wp_ + i * s.actions];
      for (std::size_t a = 0; a < s.actions; ++a) out.logits[a] += v * row[a];
      out.value += v * params_[wv_ + i];
    }
  }

  /// Accumulates dL/dparams into `grad` given dL/dlogits and dL/dvalue.
  void backward(const SparseFeatures& x, const Activations& act, std::span<const double> dlogits, double dvalue,
                std::span<double> grad) const {
    const auto& s = shape_;
    if (grad.size() != params_.size()) throw std::invalid_argument("gradient buffer length mismatch");
    std::vector<double> dh2(s.hidden2, 0.0);
    for (std::size_t i = 0; i < s.hidden2; ++i) {
      const double v = act.h2[i];
      const double* row = &params_[wp_ + i * s.actions];
      double* grow = &grad[wp_ + i * s.actions];
      for (std::size_t a = 0; a < s.actions; ++a) {
        grow[a] += v * dlogits[a];
        dh2[i] += row[a] * dlogits[a];
      }
      grad[wv_ + i] += v * dvalue;
      dh2[i] += params_[wv_ + i] * dvalue;
    }
    for (std::size_t a = 0; a < s.actions; ++a) grad[bp_ + a] += dlogits[a];
    grad[bv_] += dvalue;

    for (std::size_t j = 0; j < s.hidden2; ++j) dh2[j] *= 1.0 - act.h2[j] * act.h2[j];
    std::vector<double> dh1(s.hidden1, 0.0);
    for (std::size_t i = 0; i < s.hidden1; ++i) {
      const double v = act.h1[i];
      const double* row = &params_[w2_ + i * s.hidden2];
      double* grow = &grad[w2_ + i * s.hidden2];
      double acc = 0.0;
      for (std::size_t j = 0; j < s.hidden2; ++j) {
        grow[j] += v * dh2[j];
        acc += row[j] * dh2[j];
      }
      dh1[i] = acc * (1.0 - v * v);
    }
    for (std::size_t j = 0; j < s.hidden2; ++j) grad[b2_ + j] += dh2[j];
    for (std::size_t j = 0; j < s.hidden1; ++j) grad[b1_ + j] += dh1[j];
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double v = x.value[k];
      double* grow = &grad[w1_ + x.index[k] * s.hidden1];
      for (std::size_t j = 0; j < s.hidden1; ++j) grow[j] += v * dh1[j];
    }
  }

 private:
  NetworkShape shape_;
  std::vector<double> params_;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, wp_ = 0, bp_ = 0, wv_ = 0, bv_ = 0;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("Adam size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
inline double clip_grad_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grad) g *= scale;
  }
  return norm;
}

}  // namespace shieldbench
