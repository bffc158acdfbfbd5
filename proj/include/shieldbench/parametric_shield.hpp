#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "shieldbench/rng.hpp"
#include "shieldbench/shield.hpp"

namespace shieldbench {

/// Logistic shield: score(s, a) = sigmoid(w . phi(s, a) + b) estimates the
/// probability that a pair is safe; query() is true iff score >= threshold.
///
/// phi concatenates the 128 StateKey bits (byte-major, LSB first) with a
/// one-hot encoding of the action.
class ParametricShield final : public Shield {
 public:
  static constexpr std::size_t kStateBits = StateKey::kSize * 8;

  explicit ParametricShield(std::size_t action_count, double threshold = 0.5)
      : action_count_(action_count), threshold_(threshold),
        weights_(kStateBits + action_count, 0.0) {
    if (action_count == 0) throw std::invalid_argument("parametric shield needs at least one action");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  }

  ShieldVariant variant() const noexcept override { return ShieldVariant::kParametric; }

  bool query(const ShieldKey& key) override { return score(key) >= threshold_; }

  void record(const ShieldKey&) override {
    throw std::logic_error("parametric shields are trained offline with train_parametric()");
  }

  std::size_t size() const override { return weights_.size() + 1; }

  std::size_t feature_dim() const noexcept { return weights_.size(); }
  std::size_t action_count() const noexcept { return action_count_; }
  double threshold() const noexcept { return threshold_; }
  double bias() const noexcept { return bias_; }
  std::span<const double> weights() const noexcept { return weights_; }

  void set_parameters(std::span<const double> weights, double bias) {
    if (weights.size() != weights_.size()) throw std::invalid_argument("parametric weight length mismatch");
    std::copy(weights.begin(), weights.end(), weights_.begin());
    bias_ = bias;
  }

  /// Indices of the non-zero (unit) features of phi(key).
  std::vector<std::size_t> active_features(const ShieldKey& key) const {
    if (key.action.value() >= action_count_) throw std::out_of_range("action outside parametric feature encoding");
    std::vector<std::size_t> active;
    const auto& bytes = key.state.bytes();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      for (std::size_t bit = 0; bit < 8; ++bit) {
        if ((bytes[i] >> bit) & 1U) active.push_back(i * 8 + bit);
      }
    }
    active.push_back(kStateBits + key.action.value());
    return active;
  }

  double logit(const ShieldKey& key) const {
    double z = bias_;
    for (auto i : active_features(key)) z += weights_[i];
    return z;
  }

  double score(const ShieldKey& key) const { return 1.0 / (1.0 + std::exp(-logit(key))); }

 private:
  std::size_t action_count_;
  double threshold_;
  std::vector<double> weights_;
  double bias_ = 0.0;
};

namespace detail {
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace detail

/// Binary cross-entropy with separate expectations over the two classes:
///   L = -E_{safe}[log S] - E_{catastrophic}[log(1 - S)].
/// Writes dL/dw into grad (length feature_dim + 1, bias last) when non-empty.
inline double parametric_loss(const ParametricShield& shield, std::span<const ShieldKey> catastrophic,
                              std::span<const ShieldKey> safe, std::span<double> grad = {}) {
  const bool want_grad = !grad.empty();
  if (want_grad) {
    if (grad.size() != shield.feature_dim() + 1) throw std::invalid_argument("gradient buffer size mismatch");
    std::fill(grad.begin(), grad.end(), 0.0);
  }
  double loss = 0.0;
  auto accumulate = [&](std::span<const ShieldKey> keys, bool is_safe) {
    if (keys.empty()) return;
    const double inv = 1.0 / static_cast<double>(keys.size());
    for (const auto& key : keys) {
      const double z = shield.logit(key);
      // -log S = softplus(-z); -log(1-S) = softplus(z)
      loss += inv * (is_safe ? detail::softplus(-z) : detail::softplus(z));
      if (!want_grad) continue;
      const double dz = inv * (is_safe ? detail::sigmoid(z) - 1.0 : detail::sigmoid(z));
      for (auto i : shield.active_features(key)) grad[i] += dz;
      grad.back() += dz;
    }
  };
  accumulate(safe, true);
  accumulate(catastrophic, false);
  return loss;
}

struct ParametricTrainOptions {
  std::size_t epochs = 200;
  double learning_rate = 0.5;
  std::size_t action_count = 0;  // 0: one more than the largest action seen
  double threshold = 0.5;
};

struct ParametricTrainResult {
  ParametricShield shield;
  std::vector<double> loss_history;  // initial loss, then one entry per epoch
};

/// Full-batch gradient descent on parametric_loss. Each epoch starts from the
/// given learning rate and halves the step until the loss does not increase,
/// so the recorded history is non-increasing.
inline ParametricTrainResult train_parametric(std::span<const ShieldKey> catastrophic,
                                              std::span<const ShieldKey> safe,
                                              const ParametricTrainOptions& options) {
  if (catastrophic.empty()) throw std::invalid_argument("train_parametric: no catastrophic pairs to learn from");
  {
    std::set<ShieldKey> pos(catastrophic.begin(), catastrophic.end());
    for (const auto& k : safe) {
      if (pos.contains(k)) throw std::invalid_argument("train_parametric: catastrophic and safe sets overlap");
    }
  }
  std::size_t action_count = options.action_count;
  if (action_count == 0) {
    for (const auto& k : catastrophic) action_count = std::max(action_count, k.action.value() + 1);
    for (const auto& k : safe) action_count = std::max(action_count, k.action.value() + 1);
  }

  ParametricTrainResult result{ParametricShield(action_count, options.threshold), {}};
  auto& shield = result.shield;
  const std::size_t dim = shield.feature_dim();
  std::vector<double> grad(dim + 1);
  std::vector<double> w(shield.weights().begin(), shield.weights().end());
  double b = shield.bias();

  double loss = parametric_loss(shield, catastrophic, safe, grad);
  result.loss_history.push_back(loss);
  ParametricShield trial = shield;
  std::vector<double> w_trial(dim);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    double step = options.learning_rate;
    double trial_loss = loss;
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings, step *= 0.5) {
      for (std::size_t i = 0; i < dim; ++i) w_trial[i] = w[i] - step * grad[i];
      trial.set_parameters(w_trial, b - step * grad.back());
      trial_loss = parametric_loss(trial, catastrophic, safe);
      if (trial_loss <= loss) {
        accepted = true;
        break;
      }
    }
    if (accepted) {
      w = w_trial;
      b -= step * grad.back();
      shield.set_parameters(w, b);
      loss = parametric_loss(shield, catastrophic, safe, grad);
    }
    result.loss_history.push_back(loss);
  }
  return result;
}

/// Draws up to `count` distinct safe pairs uniformly from experienced safe
/// pairs, skipping any that are known catastrophic.
inline std::vector<ShieldKey> draw_negatives(std::span<const ShieldKey> safe_experience,
                                             std::span<const ShieldKey> catastrophic, std::size_t count,
                                             Rng& rng) {
  std::set<ShieldKey> excluded(catastrophic.begin(), catastrophic.end());
  std::vector<ShieldKey> pool;
  std::set<ShieldKey> seen;
  for (const auto& k : safe_experience) {
    if (!excluded.contains(k) && seen.insert(k).second) pool.push_back(k);
  }
  rng.shuffle(pool.begin(), pool.end());
  if (pool.size() > count) pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace shieldbench
