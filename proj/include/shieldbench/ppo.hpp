#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shieldbench/network.hpp"
#include "shieldbench/pomdp.hpp"
#include "shieldbench/rng.hpp"
#include "shieldbench/shield.hpp"
#include "shieldbench/shield_io.hpp"

namespace shieldbench {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double learning_rate = 3e-4;
  std::size_t epochs = 4;
  std::size_t minibatch = 64;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  std::size_t segment = 2048;
  std::size_t hidden = 64;
  double max_grad_norm = 0.5;  // <= 0 disables clipping

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    if (!(clip > 0.0)) throw std::invalid_argument("clip must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (minibatch == 0) throw std::invalid_argument("minibatch must be positive");
    if (segment == 0) throw std::invalid_argument("segment must be positive");
    if (hidden == 0) throw std::invalid_argument("hidden must be positive");
    if (!(entropy_coef >= 0.0) || !(value_coef >= 0.0)) throw std::invalid_argument("loss coefficients must be >= 0");
  }
};

/// One stored step. `mask` is the shield mask used when the action was
/// sampled (1 = allowed); `fallback` marks steps where every action was
/// blocked and the default policy was used.
struct RolloutStep {
  SparseFeatures features;
  std::vector<std::uint8_t> mask;
  bool fallback = false;
  ActionId action;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool terminal = false;
  bool episode_end = false;  // terminal, truncated, or segment cut
  double next_value = 0.0;   // V(s_{t+1}); only read when !terminal
  double advantage = 0.0;
  double ret = 0.0;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Generalized advantage estimation over a buffer of consecutive steps.
///   delta_t = r_t + gamma * next_value_t * (1 - terminal_t) - value_t
///   A_t     = delta_t + gamma * lambda * (1 - episode_end_t) * A_{t+1}
/// returns = A + value.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const double> next_values, std::span<const std::uint8_t> terminals,
                             std::span<const std::uint8_t> episode_ends, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || next_values.size() != n || terminals.size() != n || episode_ends.size() != n) {
    throw std::invalid_argument("compute_gae: input lengths differ");
  }
  if (n > 0 && !episode_ends[n - 1]) throw std::invalid_argument("compute_gae: buffer must end on a segment boundary");
  GaeResult out{std::vector<double>(n), std::vector<double>(n)};
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double bootstrap = terminals[i] ? 0.0 : gamma * next_values[i];
    const double delta = rewards[i] + bootstrap - values[i];
    const double carry = episode_ends[i] ? 0.0 : gamma * lambda * next_adv;
    out.advantages[i] = delta + carry;
    out.returns[i] = out.advantages[i] + values[i];
    next_adv = out.advantages[i];
  }
  return out;
}

inline void normalize_advantages(std::span<double> adv) {
  if (adv.empty()) return;
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(adv.size())), 1e-8);
  for (auto& a : adv) a = (a - mean) / sd;
}

/// Log-probabilities of the distribution left after masking the softmax of
/// `logits`; masked actions get -inf. With an all-zero mask every entry is
/// -inf (callers use the default policy instead).
inline std::vector<double> masked_log_softmax(std::span<const double> logits, std::span<const std::uint8_t> mask) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < logits.size(); ++a) {
    if (mask[a]) hi = std::max(hi, logits[a]);
  }
  double z = 0.0;
  for (std::size_t a = 0; a < logits.size(); ++a) {
    if (mask[a]) z += std::exp(logits[a] - hi);
  }
  const double lse = hi + std::log(z);
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t a = 0; a < logits.size(); ++a) {
    if (mask[a]) out[a] = logits[a] - lse;
  }
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const std::vector<std::uint8_t> all(logits.size(), 1);
  auto lp = masked_log_softmax(logits, all);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

struct PpoLossTerms {
  double policy_loss = 0.0;  // -mean clipped surrogate
  double value_loss = 0.0;   // mean (V - R)^2
  double entropy = 0.0;      // mean entropy of the shielded distribution
  double total = 0.0;        // policy_loss + value_coef * value_loss - entropy_coef * entropy
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

/// Loss on a minibatch and, when `grad` is non-empty, its gradient w.r.t. the
/// network parameters (overwritten, not accumulated).
inline PpoLossTerms ppo_loss(const PolicyNetwork& net, std::span<const RolloutStep* const> batch,
                             const PpoConfig& cfg, std::span<double> grad = {}) {
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
  PpoLossTerms t;
  if (batch.empty()) return t;
  const double inv = 1.0 / static_cast<double>(batch.size());
  const std::size_t actions = net.shape().actions;
  PolicyNetwork::Activations act;
  std::vector<double> dlogits(actions);
  for (const RolloutStep* s : batch) {
    net.forward(s->features, act);
    std::fill(dlogits.begin(), dlogits.end(), 0.0);
    const double verr = act.value - s->ret;
    t.value_loss += inv * verr * verr;
    const double dvalue = inv * 2.0 * cfg.value_coef * verr;
    if (s->fallback) {
      // default policy: the surrogate and entropy do not depend on theta
      t.policy_loss -= inv * s->advantage;
    } else {
      const auto lp = masked_log_softmax(act.logits, s->mask);
      const std::size_t a = s->action.value();
      const double ratio = std::exp(lp[a] - s->log_prob);
      const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
      const double surr1 = ratio * s->advantage;
      const double surr2 = clipped * s->advantage;
      const bool unclipped = surr1 <= surr2;
      t.policy_loss -= inv * std::min(surr1, surr2);
      t.clip_fraction += inv * (std::abs(ratio - 1.0) > cfg.clip ? 1.0 : 0.0);
      t.approx_kl += inv * (s->log_prob - lp[a]);
      double h = 0.0;
      for (std::size_t b = 0; b < actions; ++b) {
        if (s->mask[b]) h -= std::exp(lp[b]) * lp[b];
      }
      t.entropy += inv * h;
      const double dsurr_dlp = unclipped ? surr1 : 0.0;
      for (std::size_t b = 0; b < actions; ++b) {
        if (!s->mask[b]) continue;
        const double p = std::exp(lp[b]);
        const double dlp = (b == a ? 1.0 : 0.0) - p;
        const double dh = -p * (lp[b] + h);
        dlogits[b] = inv * (-dsurr_dlp * dlp - cfg.entropy_coef * dh);
      }
    }
    if (want_grad) net.backward(s->features, act, dlogits, dvalue, grad);
  }
  t.total = t.policy_loss + cfg.value_coef * t.value_loss - cfg.entropy_coef * t.entropy;
  return t;
}

struct UpdateStats {
  std::size_t samples = 0;
  std::size_t minibatches = 0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  bool aborted = false;  // a non-finite loss stopped the update
};

struct ActionDecision {
  ActionId action;
  double log_prob = 0.0;
  double value = 0.0;
  bool fallback = false;
  std::vector<double> probs;  // the distribution actually sampled from
};

/// PPO learner: network, optimizer and rollout buffer. Single-owner.
class PpoAgent {
 public:
  PpoAgent(NetworkShape shape, PpoConfig cfg, std::uint64_t init_seed, std::size_t active_inputs)
      : cfg_(cfg), net_(shape), adam_(shape.param_count(), cfg.learning_rate) {
    cfg_.validate();
    Rng rng(init_seed);
    net_.initialize(rng, active_inputs);
    grad_.assign(net_.param_count(), 0.0);
  }

  const PpoConfig& config() const noexcept { return cfg_; }
  PolicyNetwork& network() noexcept { return net_; }
  const PolicyNetwork& network() const noexcept { return net_; }
  std::size_t action_count() const noexcept { return net_.shape().actions; }

  /// Forward pass and shielded sampling. With `rng == nullptr` the action is
  /// the argmax of the shielded distribution (lowest index on ties).
  ActionDecision decide(const SparseFeatures& x, std::span<const std::uint8_t> mask,
                        std::span<const double> default_policy, Rng* rng) const {
    net_.forward(x, act_);
    for (double z : act_.logits) {
      if (!std::isfinite(z)) throw NumericalError(dump("non-finite logits", x));
    }
    if (!std::isfinite(act_.value)) throw NumericalError(dump("non-finite value", x));
    ActionDecision d;
    d.value = act_.value;
    d.probs = apply_shield(softmax(act_.logits), mask, default_policy);
    d.fallback = std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
    if (rng != nullptr) {
      d.action = ActionId(rng->categorical(d.probs));
    } else {
      d.action = ActionId(static_cast<std::size_t>(std::max_element(d.probs.begin(), d.probs.end()) - d.probs.begin()));
    }
    if (d.fallback) {
      d.log_prob = std::log(d.probs[d.action.value()]);
    } else {
      d.log_prob = masked_log_softmax(act_.logits, mask)[d.action.value()];
    }
    return d;
  }

  double value_of(const SparseFeatures& x) const {
    net_.forward(x, act_);
    return act_.value;
  }

  void store(RolloutStep step) { buffer_.push_back(std::move(step)); }
  std::size_t buffer_size() const noexcept { return buffer_.size(); }
  bool buffer_full() const noexcept { return buffer_.size() >= cfg_.segment; }
  std::span<const RolloutStep> buffer() const noexcept { return buffer_; }

  /// Closes the current segment at the last stored step, bootstrapping from
  /// `next_value` unless that step was terminal.
  void end_segment(double next_value) {
    if (buffer_.empty()) return;
    buffer_.back().episode_end = true;
    buffer_.back().next_value = next_value;
  }

  /// Link V(s_{t+1}) for the previous step once the next step's value is known.
  void chain_value(double value) {
    if (!buffer_.empty() && !buffer_.back().episode_end) buffer_.back().next_value = value;
  }

  UpdateStats update(Rng& rng) {
    UpdateStats stats;
    if (buffer_.empty()) return stats;
    const std::size_t n = buffer_.size();
    {
      std::vector<double> r(n), v(n), nv(n);
      std::vector<std::uint8_t> term(n), ends(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = buffer_[i].reward;
        v[i] = buffer_[i].value;
        nv[i] = buffer_[i].next_value;
        term[i] = buffer_[i].terminal;
        ends[i] = buffer_[i].episode_end;
      }
      ends[n - 1] = 1;
      auto gae = compute_gae(r, v, nv, term, ends, cfg_.gamma, cfg_.lambda);
      normalize_advantages(gae.advantages);
      for (std::size_t i = 0; i < n; ++i) {
        buffer_[i].advantage = gae.advantages[i];
        buffer_[i].ret = gae.returns[i];
      }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<const RolloutStep*> batch;
    for (std::size_t epoch = 0; epoch < cfg_.epochs && !stats.aborted; ++epoch) {
      rng.shuffle(order.begin(), order.end());
      for (std::size_t start = 0; start < n; start += cfg_.minibatch) {
        batch.clear();
        for (std::size_t i = start; i < std::min(n, start + cfg_.minibatch); ++i) batch.push_back(&buffer_[order[i]]);
        const auto terms = ppo_loss(net_, batch, cfg_, grad_);
        const bool finite_grad = std::all_of(grad_.begin(), grad_.end(), [](double g) { return std::isfinite(g); });
        if (!std::isfinite(terms.total) || !finite_grad) {
          stats.aborted = true;
          break;
        }
        clip_grad_norm(grad_, cfg_.max_grad_norm);
        adam_.step(net_.params(), grad_);
        ++stats.minibatches;
        stats.policy_loss += terms.policy_loss;
        stats.value_loss += terms.value_loss;
        stats.entropy += terms.entropy;
        stats.approx_kl += terms.approx_kl;
        stats.clip_fraction += terms.clip_fraction;
      }
    }
    if (stats.minibatches > 0) {
      const double k = static_cast<double>(stats.minibatches);
      stats.policy_loss /= k;
      stats.value_loss /= k;
      stats.entropy /= k;
      stats.approx_kl /= k;
      stats.clip_fraction /= k;
    }
    stats.samples = n;
    buffer_.clear();
    return stats;
  }

 private:
  std::string dump(const char* what, const SparseFeatures& x) const {
    std::ostringstream out;
    out.precision(17);
    out << what << "; logits [";
    for (std::size_t a = 0; a < act_.logits.size(); ++a) out << (a ? ", " : "") << act_.logits[a];
    out << "], value " << act_.value << ", active inputs [";
    for (std::size_t k = 0; k < x.size(); ++k) out << (k ? ", " : "") << x.index[k] << ":" << x.value[k];
    double sq = 0.0;
    std::size_t bad = 0;
    for (double p : net_.params()) {
      if (std::isfinite(p)) {
        sq += p * p;
      } else {
        ++bad;
      }
    }
    out << "], |theta| " << std::sqrt(sq) << ", non-finite parameters " << bad;
    return out.str();
  }

  PpoConfig cfg_;
  PolicyNetwork net_;
  Adam adam_;
  std::vector<double> grad_;
  std::vector<RolloutStep> buffer_;
  mutable PolicyNetwork::Activations act_;
};

struct MistakeRecord {
  std::uint64_t episode = 0;
  std::uint64_t step = 0;
  ShieldKey key;
};

/// PPO agent wired to an optional shield. With no shield it is plain PPO.
/// The shield may be shared with other agents; it is not owned.
class ShieldedAgent {
 public:
  ShieldedAgent(PpoAgent agent, Shield* shield, std::vector<double> default_policy = {})
      : agent_(std::move(agent)), shield_(shield),
        default_policy_(default_policy.empty() ? uniform_policy(agent_.action_count()) : std::move(default_policy)) {
    if (default_policy_.size() != agent_.action_count()) throw std::invalid_argument("default policy size mismatch");
  }

  PpoAgent& ppo() noexcept { return agent_; }
  const PpoAgent& ppo() const noexcept { return agent_; }
  Shield* shield() const noexcept { return shield_; }
  const std::vector<double>& default_policy() const noexcept { return default_policy_; }
  const std::vector<MistakeRecord>& mistake_log() const noexcept { return mistakes_; }

  std::vector<std::uint8_t> mask_for(const StateKey& state) const {
    std::vector<std::uint8_t> mask(agent_.action_count(), 1);
    if (shield_ == nullptr) return mask;
    for (std::size_t a = 0; a < mask.size(); ++a) mask[a] = shield_->query(ShieldKey{state, ActionId(a)}) ? 1 : 0;
    return mask;
  }

  /// Samples from the shielded policy; greedy when `rng` is null.
  ActionDecision sample_action(const SparseFeatures& x, const StateKey& state, Rng* rng,
                               std::vector<std::uint8_t>* mask_out = nullptr) const {
    auto mask = mask_for(state);
    auto d = agent_.decide(x, mask, default_policy_, rng);
    if (mask_out != nullptr) *mask_out = std::move(mask);
    return d;
  }

  /// Records an unsafe transition in the shield and the mistake log.
  /// Returns true when the transition was a mistake.
  template <class Obs>
  bool record_mistakes(const BasicTransition<Obs>& t, std::uint64_t episode, std::uint64_t step) {
    if (t.safety_label != 0) return false;
    const ShieldKey key{t.state_key, t.action};
    if (shield_ != nullptr) shield_->record(key);
    mistakes_.push_back({episode, step, key});
    return true;
  }

 private:
  PpoAgent agent_;
  Shield* shield_;
  std::vector<double> default_policy_;
  std::vector<MistakeRecord> mistakes_;
};

inline void write_mistake_log(std::ostream& out, std::span<const MistakeRecord> log) {
  out << "episode,step,key\n";
  for (const auto& m : log) out << m.episode << ',' << m.step << ',' << m.key.hex() << '\n';
}

// Checkpoint, version 1 (little-endian):
//   "SPPO" | u16 version | u64 inputs | u64 hidden1 | u64 hidden2 | u64 actions
//   | u64 param_count | param_count x f64
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> serialize_checkpoint(const PolicyNetwork& net) {
  detail::ByteWriter w;
  const std::uint8_t magic[4] = {'S', 'P', 'P', 'O'};
  w.raw(magic);
  w.u16(kCheckpointVersion);
  const auto& s = net.shape();
  w.u64(s.inputs);
  w.u64(s.hidden1);
  w.u64(s.hidden2);
  w.u64(s.actions);
  w.u64(net.param_count());
  for (double p : net.params()) w.f64(p);
  return w.take();
}

inline PolicyNetwork deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::string(magic.begin(), magic.end()) != "SPPO") throw FormatError("bad checkpoint magic", 0);
  if (r.u16("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", 4);
  NetworkShape s;
  s.inputs = r.u64("inputs");
  s.hidden1 = r.u64("hidden1");
  s.hidden2 = r.u64("hidden2");
  s.actions = r.u64("actions");
  const std::size_t count_offset = r.offset();
  const auto count = r.u64("param count");
  if (count != s.param_count()) throw FormatError("parameter count does not match shape", count_offset);
  if (count > r.remaining() / 8) throw FormatError("truncated stream while reading parameters", r.offset());
  PolicyNetwork net(s);
  std::vector<double> p(count);
  for (auto& v : p) v = r.f64("parameters");
  r.expect_end();
  net.set_params(p);
  return net;
}

}  // namespace shieldbench
