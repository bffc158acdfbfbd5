#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "shieldbench/config.hpp"
#include "shieldbench/lavagrid.hpp"
#include "shieldbench/layouts.hpp"
#include "shieldbench/ppo.hpp"
#include "shieldbench/rng.hpp"
#include "shieldbench/shield.hpp"
#include "shieldbench/shield_io.hpp"

namespace shieldbench {

/// Offset between the seeds of consecutive agents in one multi-agent run.
inline constexpr std::uint64_t kAgentSeedStride = 1000003;

inline std::uint64_t agent_seed(std::uint64_t run_seed, std::size_t agent) {
  return run_seed + static_cast<std::uint64_t>(agent) * kAgentSeedStride;
}

enum SeedStream : std::uint64_t {
  kInitStream = 1,
  kInstanceStream = 2,
  kActionStream = 3,
  kUpdateStream = 4,
  kEvalStream = 5,
};

inline constexpr std::size_t kWindowFeatures = kViewSize * kViewSize * kCellCodeCount;

inline std::size_t observation_feature_dim(std::size_t instance_count) { return kWindowFeatures + 2 + instance_count; }

/// One-hot cell codes for the view window, goal offset scaled to [-1, 1],
/// then the instance one-hot.
inline SparseFeatures encode_observation(const Observation& obs, double delta_scale) {
  SparseFeatures x;
  x.index.reserve(kViewSize * kViewSize + 3);
  x.value.reserve(kViewSize * kViewSize + 3);
  for (std::size_t i = 0; i < obs.window.size(); ++i) {
    x.add(i * kCellCodeCount + static_cast<std::size_t>(obs.window[i]), 1.0);
  }
  for (std::size_t k = 0; k < 2; ++k) {
    const double v = std::clamp(static_cast<double>(obs.goal_delta[k]) / delta_scale, -1.0, 1.0);
    if (v != 0.0) x.add(kWindowFeatures + k, v);
  }
  x.add(kWindowFeatures + 2 + obs.instance_index, 1.0);
  return x;
}

inline double goal_delta_scale(const LavaGridLayout& layout) {
  return static_cast<double>(std::max(1, std::max(layout.width(), layout.height()) - 1));
}

/// Builds the LavaGrid family an experiment config describes.
inline std::shared_ptr<const LavaGridDomain> make_domain(const ExperimentConfig& cfg) {
  auto layout = named_layout(cfg.layout);
  std::vector<double> probs(layout.lava_eligible().size(), 0.0);
  if (cfg.schedule == "tile" && !probs.empty()) {
    probs = tile_schedule(layout, cfg.p0, cfg.growth, cfg.cap);
  } else if (cfg.schedule == "flat") {
    probs = flat_schedule(layout, cfg.flat_p);
  }
  return std::make_shared<const LavaGridDomain>(layout.with_schedule(std::move(probs)));
}

inline std::unique_ptr<Shield> make_shield(const ExperimentConfig& cfg) {
  if (cfg.shield_variant == "bounded") return std::make_unique<BoundedShield>(cfg.bounded_capacity);
  if (cfg.shield_variant == "bloom") return std::make_unique<BloomShield>(cfg.bloom_expected, cfg.bloom_fp);
  return std::make_unique<TabularShield>();
}

struct EpisodeRecord {
  std::size_t agent = 0;
  std::uint64_t episode = 0;
  double ret = 0.0;
  std::uint64_t steps = 0;
  std::uint64_t mistakes = 0;
  std::uint64_t repeated = 0;
  bool success = false;
  std::uint32_t cluster_id = 0;
  std::size_t goal = 0;
};

/// Per-episode metrics, aggregated over the agents of one run.
struct MetricsRow {
  std::uint64_t run_seed = 0;
  std::uint64_t episode = 0;
  double mean_return = 0.0;
  std::uint64_t mistake_count = 0;
  std::uint64_t step_count = 0;
  double mistake_rate = 0.0;  // cumulative mistakes / cumulative steps
  std::uint64_t repeated_mistake_count = 0;
  double success_rate = 0.0;
};

struct EvalRow {
  std::uint64_t run_seed = 0;
  std::uint64_t env_steps = 0;
  std::size_t goal = 0;
  double success_rate = 0.0;
};

struct RunArtifact {
  std::string config_text;  // canonical snapshot of the config used
  std::string protocol;
  std::uint64_t run_seed = 0;
  std::size_t agent_count = 1;
  std::vector<MetricsRow> metrics;
  std::vector<EpisodeRecord> episodes;  // every agent's episodes, agent-major
  std::vector<EvalRow> eval;
  std::vector<std::vector<MistakeRecord>> mistakes;  // per agent
  std::vector<std::vector<std::uint8_t>> shields;      // one per distinct shield
  std::uint64_t total_steps = 0;
  std::uint64_t update_aborts = 0;
  double wall_seconds = 0.0;  // informational, never written to CSV

  std::uint64_t total_mistakes() const {
    std::uint64_t n = 0;
    for (const auto& r : metrics) n += r.mistake_count;
    return n;
  }
  std::uint64_t total_repeated() const {
    std::uint64_t n = 0;
    for (const auto& r : metrics) n += r.repeated_mistake_count;
    return n;
  }
};

namespace detail {

/// One learner with its environment, RNG streams and episode bookkeeping.
class AgentRuntime {
 public:
  AgentRuntime(const ExperimentConfig& cfg, std::shared_ptr<const LavaGridDomain> domain, std::uint64_t seed,
               std::size_t index, Shield* shield, std::set<ShieldKey>* seen, bool random_goal)
      : index_(index),
        env_(domain, LavaGridOptions{cfg.shaping_sign, cfg.max_steps, cfg.agent.gamma, random_goal}),
        agent_(make_ppo(cfg, *domain, seed), shield),
        instance_rng_(derive_seed(seed, kInstanceStream)),
        action_rng_(derive_seed(seed, kActionStream)),
        update_rng_(derive_seed(seed, kUpdateStream)),
        seen_(seen),
        delta_scale_(goal_delta_scale(domain->layout())) {
    for (std::size_t i = 0; i < cfg.instance_pool; ++i) pool_.push_back(instance_rng_.next_u64());
  }

  static PpoAgent make_ppo(const ExperimentConfig& cfg, const LavaGridDomain& domain, std::uint64_t seed) {
    const NetworkShape shape{observation_feature_dim(domain.cluster_count()), cfg.agent.hidden, cfg.agent.hidden,
                             kLavaActionCount};
    return PpoAgent(shape, cfg.agent, derive_seed(seed, kInitStream), kViewSize * kViewSize + 3);
  }

  /// Advances one environment step, starting a new episode if needed.
  /// Returns true when that step finished an episode.
  bool step() {
    if (!in_episode_) begin_episode();
    const auto x = encode_observation(obs_, delta_scale_);
    const StateKey key = env_.state_key();
    std::vector<std::uint8_t> mask;
    const auto d = agent_.sample_action(x, key, &action_rng_, &mask);
    agent_.ppo().chain_value(d.value);
    const auto t = env_.step(d.action);
    ++total_steps_;

    current_.ret += t.reward;
    ++current_.steps;
    if (agent_.record_mistakes(t, current_.episode, current_.steps - 1)) {
      ++current_.mistakes;
      if (!seen_->insert(ShieldKey{key, d.action}).second) ++current_.repeated;
    }

    RolloutStep s;
    s.features = x;
    s.mask = std::move(mask);
    s.fallback = d.fallback;
    s.action = d.action;
    s.log_prob = d.log_prob;
    s.value = d.value;
    s.reward = t.reward;
    s.terminal = t.terminal;
    agent_.ppo().store(std::move(s));
    obs_ = t.next_obs;

    const bool ended = t.terminal || t.truncated;
    if (ended) {
      agent_.ppo().end_segment(t.terminal ? 0.0 : agent_.ppo().value_of(encode_observation(obs_, delta_scale_)));
      current_.success = t.terminal && t.safety_label == 1;
      records_.push_back(current_);
      in_episode_ = false;
    }
    if (agent_.ppo().buffer_full()) {
      if (!ended) agent_.ppo().end_segment(agent_.ppo().value_of(encode_observation(obs_, delta_scale_)));
      update_pending_ = true;
    }
    return ended;
  }

  void update() {
    if (!update_pending_) return;
    if (agent_.ppo().update(update_rng_).aborted) ++update_aborts_;
    update_pending_ = false;
  }

  bool update_pending() const noexcept { return update_pending_; }
  bool in_episode() const noexcept { return in_episode_; }
  std::size_t index() const noexcept { return index_; }
  std::uint64_t episodes_done() const noexcept { return records_.size(); }
  std::uint64_t total_steps() const noexcept { return total_steps_; }
  std::uint64_t update_aborts() const noexcept { return update_aborts_; }
  const std::vector<EpisodeRecord>& records() const noexcept { return records_; }
  ShieldedAgent& agent() noexcept { return agent_; }
  const LavaGridEnv& env() const noexcept { return env_; }

 private:
  void begin_episode() {
    const std::uint64_t seed =
        pool_.empty() ? instance_rng_.next_u64() : pool_[instance_rng_.uniform_index(pool_.size())];
    obs_ = env_.reset(seed);
    current_ = EpisodeRecord{};
    current_.agent = index_;
    current_.episode = records_.size();
    current_.cluster_id = env_.instance().cluster_id;
    current_.goal = env_.goal_index();
    in_episode_ = true;
  }

  std::size_t index_;
  LavaGridEnv env_;
  ShieldedAgent agent_;
  Rng instance_rng_;
  Rng action_rng_;
  Rng update_rng_;
  std::set<ShieldKey>* seen_;
  double delta_scale_;
  std::vector<std::uint64_t> pool_;
  Observation obs_;
  EpisodeRecord current_;
  bool in_episode_ = false;
  bool update_pending_ = false;
  std::uint64_t total_steps_ = 0;
  std::uint64_t update_aborts_ = 0;
  std::vector<EpisodeRecord> records_;
};

/// Runs every pending update, on up to `workers` threads. Each update only
/// touches its own agent, so the result does not depend on `workers`.
inline void run_updates(std::vector<std::unique_ptr<AgentRuntime>>& agents, std::size_t workers) {
  std::vector<AgentRuntime*> pending;
  for (auto& a : agents) {
    if (a->update_pending()) pending.push_back(a.get());
  }
  if (pending.empty()) return;
  if (workers <= 1 || pending.size() == 1) {
    for (auto* a : pending) a->update();
    return;
  }
  const std::size_t n = std::min(workers, pending.size());
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < n; ++w) {
    threads.emplace_back([&pending, w, n] {
      for (std::size_t i = w; i < pending.size(); i += n) pending[i]->update();
    });
  }
  for (auto& t : threads) t.join();
}

inline std::vector<MetricsRow> metrics_from_records(std::uint64_t run_seed,
                                                    const std::vector<std::vector<EpisodeRecord>>& per_agent) {
  std::size_t episodes = per_agent.empty() ? 0 : per_agent.front().size();
  for (const auto& r : per_agent) episodes = std::min(episodes, r.size());
  std::vector<MetricsRow> rows;
  std::uint64_t cum_mistakes = 0, cum_steps = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    MetricsRow row;
    row.run_seed = run_seed;
    row.episode = e;
    double ret = 0.0, success = 0.0;
    for (const auto& r : per_agent) {
      ret += r[e].ret;
      success += r[e].success ? 1.0 : 0.0;
      row.mistake_count += r[e].mistakes;
      row.step_count += r[e].steps;
      row.repeated_mistake_count += r[e].repeated;
    }
    const double n = static_cast<double>(per_agent.size());
    row.mean_return = ret / n;
    row.success_rate = success / n;
    cum_mistakes += row.mistake_count;
    cum_steps += row.step_count;
    row.mistake_rate = cum_steps == 0 ? 0.0 : static_cast<double>(cum_mistakes) / static_cast<double>(cum_steps);
    rows.push_back(row);
  }
  return rows;
}

/// Greedy success rate per goal, with the (read-only) shield still applied.
inline std::vector<double> evaluate_goals(AgentRuntime& runtime, std::shared_ptr<const LavaGridDomain> domain,
                                          const ExperimentConfig& cfg, Rng& rng) {
  LavaGridEnv env(domain, LavaGridOptions{cfg.shaping_sign, cfg.max_steps, cfg.agent.gamma, false});
  const double scale = goal_delta_scale(domain->layout());
  std::vector<double> rates;
  for (std::size_t g = 0; g < domain->layout().goals().size(); ++g) {
    std::size_t successes = 0;
    for (std::size_t ep = 0; ep < cfg.eval_episodes; ++ep) {
      Rng inst_rng(rng.next_u64());
      auto obs = env.begin(domain->sample_instance(inst_rng), g);
      while (!env.done()) {
        const auto d = runtime.agent().sample_action(encode_observation(obs, scale), env.state_key(), nullptr);
        const auto t = env.step(d.action);
        obs = t.next_obs;
        if (t.terminal && t.safety_label == 1) ++successes;
      }
    }
    rates.push_back(static_cast<double>(successes) / static_cast<double>(cfg.eval_episodes));
  }
  return rates;
}

}  // namespace detail

using ProgressFn = std::function<void(const std::string&)>;

/// Runs one seed of any protocol. The config must already be validated.
inline RunArtifact run_experiment(const ExperimentConfig& cfg, std::uint64_t run_seed, const ProgressFn& progress = {}) {
  const auto started = std::chrono::steady_clock::now();
  const auto domain = make_domain(cfg);
  const bool multi = cfg.protocol == "multi";
  const bool goal = cfg.protocol == "goal";
  const std::size_t n_agents = multi ? cfg.agent_count : 1;

  RunArtifact art;
  art.config_text = cfg.to_text();
  art.protocol = cfg.protocol;
  art.run_seed = run_seed;
  art.agent_count = n_agents;

  // Shields and the scope in which a repeated mistake is counted.
  std::vector<std::unique_ptr<Shield>> shields;
  std::vector<std::set<ShieldKey>> seen(multi && cfg.shield_mode == "shared" ? 1 : n_agents);
  const bool shielded = cfg.uses_shield();
  if (shielded) shields.push_back(make_shield(cfg));
  if (shielded && multi && cfg.shield_mode == "individual") {
    for (std::size_t i = 1; i < n_agents; ++i) shields.push_back(make_shield(cfg));
  }
  std::vector<std::unique_ptr<detail::AgentRuntime>> agents;
  for (std::size_t i = 0; i < n_agents; ++i) {
    Shield* shield = shielded ? shields[shields.size() == 1 ? 0 : i].get() : nullptr;
    auto* scope = &seen[seen.size() == 1 ? 0 : i];
    agents.push_back(std::make_unique<detail::AgentRuntime>(cfg, domain, agent_seed(run_seed, i), i, shield, scope, goal));
  }

  auto finished = [&](const detail::AgentRuntime& a) {
    if (a.in_episode()) return false;
    if (goal && cfg.train_steps > 0) return a.total_steps() >= cfg.train_steps;
    return a.episodes_done() >= cfg.episodes;
  };

  Rng eval_rng(derive_seed(agent_seed(run_seed, 0), kEvalStream));
  std::uint64_t next_eval = cfg.eval_interval;
  const std::size_t workers = cfg.workers == 0 ? n_agents : cfg.workers;
  std::uint64_t progress_mark = 0;
  for (;;) {
    bool any = false;
    for (auto& a : agents) {
      if (finished(*a)) continue;
      any = true;
      a->step();
    }
    if (!any) break;
    detail::run_updates(agents, workers);
    if (goal && agents[0]->total_steps() >= next_eval) {
      const auto rates = detail::evaluate_goals(*agents[0], domain, cfg, eval_rng);
      for (std::size_t g = 0; g < rates.size(); ++g) art.eval.push_back({run_seed, agents[0]->total_steps(), g, rates[g]});
      next_eval += cfg.eval_interval;
    }
    if (progress && agents[0]->episodes_done() >= progress_mark + 100) {
      progress_mark = agents[0]->episodes_done();
      progress("seed " + std::to_string(run_seed) + ": episode " + std::to_string(progress_mark));
    }
  }

  std::vector<std::vector<EpisodeRecord>> per_agent;
  for (auto& a : agents) {
    per_agent.push_back(a->records());
    art.episodes.insert(art.episodes.end(), a->records().begin(), a->records().end());
    art.mistakes.push_back(a->agent().mistake_log());
    art.total_steps += a->total_steps();
    art.update_aborts += a->update_aborts();
  }
  art.metrics = detail::metrics_from_records(run_seed, per_agent);
  for (const auto& s : shields) art.shields.push_back(serialize(*s));
  art.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return art;
}

inline RunArtifact run_single(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  if (cfg.protocol != "single") throw ConfigError("run_single needs protocol single");
  return run_experiment(cfg, run_seed);
}

inline RunArtifact run_multi(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  if (cfg.protocol != "multi") throw ConfigError("run_multi needs protocol multi");
  return run_experiment(cfg, run_seed);
}

inline RunArtifact run_goal_conditioned(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  if (cfg.protocol != "goal") throw ConfigError("run_goal_conditioned needs protocol goal");
  return run_experiment(cfg, run_seed);
}

}  // namespace shieldbench
