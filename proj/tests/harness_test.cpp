#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "shieldbench/harness.hpp"
#include "shieldbench/report.hpp"

namespace shieldbench {
namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.layout = "mini";
  cfg.schedule = "flat";
  cfg.flat_p = 0.5;
  cfg.episodes = 40;
  cfg.seeds = {1};
  cfg.agent.segment = 128;
  cfg.agent.minibatch = 32;
  cfg.agent.hidden = 16;
  cfg.agent.learning_rate = 0.002;
  return cfg;
}

ExperimentConfig multi_config(const std::string& mode, std::size_t agents) {
  auto cfg = small_config();
  cfg.protocol = "multi";
  cfg.shield_mode = mode;
  cfg.agent_count = agents;
  cfg.episodes = 25;
  return cfg;
}

TEST(EncodeTest, LayoutOfFeatures) {
  auto domain = std::make_shared<const LavaGridDomain>(named_layout("open5"));
  LavaGridEnv env(domain);
  const auto obs = env.reset(3);
  const double scale = goal_delta_scale(domain->layout());
  const auto x = encode_observation(obs, scale);
  const std::size_t dim = observation_feature_dim(domain->cluster_count());
  EXPECT_EQ(dim, env.spec().feature_dim);
  std::size_t window_hits = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    ASSERT_LT(x.index[k], dim);
    if (x.index[k] < kWindowFeatures) {
      ++window_hits;
      EXPECT_EQ(x.value[k], 1.0);
    }
  }
  EXPECT_EQ(window_hits, static_cast<std::size_t>(kViewSize * kViewSize));
  EXPECT_EQ(x.index.back(), kWindowFeatures + 2 + obs.instance_index);
  // Start (1,1) facing east, goal (5,5): 4 ahead, 4 to the right, scale 6.
  std::map<std::uint32_t, double> dense;
  for (std::size_t k = 0; k < x.size(); ++k) dense[x.index[k]] += x.value[k];
  EXPECT_DOUBLE_EQ(dense[kWindowFeatures], obs.goal_delta[0] / scale);
  EXPECT_DOUBLE_EQ(dense[kWindowFeatures + 1], obs.goal_delta[1] / scale);
}

TEST(EncodeTest, GoalDeltaClamped) {
  Observation obs;
  obs.goal_delta = {100, -100};
  const auto x = encode_observation(obs, 5.0);
  std::map<std::uint32_t, double> dense;
  for (std::size_t k = 0; k < x.size(); ++k) dense[x.index[k]] = x.value[k];
  EXPECT_EQ(dense[kWindowFeatures], 1.0);
  EXPECT_EQ(dense[kWindowFeatures + 1], -1.0);
}

TEST(HarnessTest, ZeroEpisodesGivesEmptyArtifact) {
  auto cfg = small_config();
  cfg.episodes = 0;
  const auto art = run_single(cfg, 1);
  EXPECT_TRUE(art.metrics.empty());
  EXPECT_TRUE(art.episodes.empty());
  EXPECT_EQ(art.total_steps, 0u);
  EXPECT_EQ(metrics_csv(art.metrics), std::string(kMetricsHeader) + "\n");
}

TEST(HarnessTest, ProtocolMismatchRejected) {
  auto cfg = small_config();
  EXPECT_THROW(run_multi(cfg, 1), ConfigError);
  EXPECT_THROW(run_goal_conditioned(cfg, 1), ConfigError);
}

TEST(HarnessTest, IdenticalConfigGivesIdenticalCsv) {
  const auto cfg = small_config();
  const auto a = run_single(cfg, 7);
  const auto b = run_single(cfg, 7);
  EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
  EXPECT_EQ(episodes_csv(a.episodes), episodes_csv(b.episodes));
  EXPECT_EQ(a.shields, b.shields);
  const auto c = run_single(cfg, 8);
  EXPECT_NE(metrics_csv(a.metrics), metrics_csv(c.metrics));
}

TEST(HarnessTest, MetricsRowsAreConsistent) {
  const auto art = run_single(small_config(), 2);
  ASSERT_EQ(art.metrics.size(), 40u);
  std::uint64_t mistakes = 0, steps = 0;
  for (std::size_t e = 0; e < art.metrics.size(); ++e) {
    const auto& row = art.metrics[e];
    EXPECT_EQ(row.episode, e);
    EXPECT_EQ(row.run_seed, 2u);
    mistakes += row.mistake_count;
    steps += row.step_count;
    EXPECT_DOUBLE_EQ(row.mistake_rate, static_cast<double>(mistakes) / static_cast<double>(steps));
    EXPECT_EQ(row.mean_return, art.episodes[e].ret);
    EXPECT_LE(row.mistake_count, 1u);  // lava ends the episode
    EXPECT_LE(row.step_count, 4u * (7 + 5));
  }
  EXPECT_EQ(steps, art.total_steps);
  EXPECT_EQ(mistakes, art.mistakes.front().size());
}

TEST(HarnessTest, TabularShieldNeverRepeats) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto cfg = small_config();
    cfg.episodes = 150;
    const auto art = run_single(cfg, seed);
    EXPECT_GT(art.total_mistakes(), 0u);
    EXPECT_EQ(art.total_repeated(), 0u);
    std::set<ShieldKey> keys;
    for (const auto& m : art.mistakes.front()) EXPECT_TRUE(keys.insert(m.key).second);
  }
}

TEST(HarnessTest, PlainPpoRepeatsOnAdversarialMini) {
  int repeating = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = small_config();
    cfg.algorithm = "ppo";
    cfg.episodes = 200;
    const auto art = run_single(cfg, seed);
    EXPECT_TRUE(art.shields.empty());
    if (art.total_repeated() > 0) ++repeating;
  }
  EXPECT_GE(repeating, 4);
}

TEST(HarnessTest, RepeatCountMatchesMistakeLog) {
  auto cfg = small_config();
  cfg.algorithm = "ppo";
  cfg.episodes = 120;
  const auto art = run_single(cfg, 4);
  std::set<ShieldKey> seen;
  std::uint64_t repeats = 0;
  for (const auto& m : art.mistakes.front()) repeats += seen.insert(m.key).second ? 0 : 1;
  EXPECT_EQ(art.total_repeated(), repeats);
}

TEST(HarnessTest, InstancePoolLimitsInstances) {
  auto cfg = small_config();
  cfg.layout = "desk";
  cfg.schedule = "flat";
  cfg.flat_p = 0.2;
  cfg.instance_pool = 3;
  cfg.episodes = 30;
  const auto art = run_single(cfg, 5);
  std::set<std::uint32_t> clusters;
  for (const auto& e : art.episodes) clusters.insert(e.cluster_id);
  EXPECT_LE(clusters.size(), 3u);
}

TEST(MultiTest, NoneModeMatchesIndependentSingleRuns) {
  const auto cfg = multi_config("none", 3);
  const auto multi = run_multi(cfg, 11);
  EXPECT_TRUE(multi.shields.empty());
  ASSERT_EQ(multi.episodes.size(), 3u * 25u);
  for (std::size_t i = 0; i < 3; ++i) {
    auto single = small_config();
    single.algorithm = "ppo";
    single.episodes = 25;
    const auto art = run_single(single, agent_seed(11, i));
    for (std::size_t e = 0; e < 25; ++e) {
      const auto& m = multi.episodes[i * 25 + e];
      const auto& s = art.episodes[e];
      ASSERT_EQ(m.agent, i);
      EXPECT_EQ(m.ret, s.ret) << "agent " << i << " episode " << e;
      EXPECT_EQ(m.steps, s.steps);
      EXPECT_EQ(m.cluster_id, s.cluster_id);
      EXPECT_EQ(m.mistakes, s.mistakes);
    }
  }
}

TEST(MultiTest, MetricsAggregateOverAgents) {
  const auto art = run_multi(multi_config("individual", 4), 3);
  ASSERT_EQ(art.metrics.size(), 25u);
  EXPECT_EQ(art.shields.size(), 4u);
  for (std::size_t e = 0; e < 25; ++e) {
    double ret = 0.0;
    std::uint64_t steps = 0, mistakes = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      ret += art.episodes[i * 25 + e].ret;
      steps += art.episodes[i * 25 + e].steps;
      mistakes += art.episodes[i * 25 + e].mistakes;
    }
    EXPECT_DOUBLE_EQ(art.metrics[e].mean_return, ret / 4.0);
    EXPECT_EQ(art.metrics[e].step_count, steps);
    EXPECT_EQ(art.metrics[e].mistake_count, mistakes);
  }
}

TEST(MultiTest, WorkerCountDoesNotChangeResults) {
  auto a_cfg = multi_config("shared", 4);
  a_cfg.workers = 1;
  auto b_cfg = a_cfg;
  b_cfg.workers = 4;
  const auto a = run_multi(a_cfg, 21);
  const auto b = run_multi(b_cfg, 21);
  EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
  EXPECT_EQ(episodes_csv(a.episodes), episodes_csv(b.episodes));
  EXPECT_EQ(a.shields, b.shields);
}

TEST(MultiTest, SharedShieldIsNeverRepeatedByAnyAgent) {
  const auto art = run_multi(multi_config("shared", 5), 9);
  ASSERT_EQ(art.shields.size(), 1u);
  std::set<ShieldKey> all;
  std::size_t logged = 0;
  for (const auto& log : art.mistakes) {
    for (const auto& m : log) {
      EXPECT_TRUE(all.insert(m.key).second) << m.key.hex();
      ++logged;
    }
  }
  EXPECT_GT(logged, 0u);
  EXPECT_EQ(art.total_repeated(), 0u);
  const auto shield = deserialize(art.shields.front());
  EXPECT_EQ(shield->size(), all.size());
}

TEST(MultiTest, IndividualShieldsRepeatAcrossAgentsOnly) {
  const auto art = run_multi(multi_config("individual", 5), 9);
  EXPECT_EQ(art.total_repeated(), 0u);
  std::map<ShieldKey, std::size_t> owners;
  for (const auto& log : art.mistakes) {
    std::set<ShieldKey> own;
    for (const auto& m : log) EXPECT_TRUE(own.insert(m.key).second);
    for (const auto& k : own) ++owners[k];
  }
  std::size_t shared_keys = 0;
  for (const auto& [k, n] : owners) shared_keys += n > 1;
  EXPECT_GT(shared_keys, 0u);  // the same lava hit by several agents
}

TEST(MultiTest, KeyRecordedByOneAgentBlocksAnother) {
  auto domain = std::make_shared<const LavaGridDomain>(named_layout("mini").with_schedule({0.5}));
  TabularShield shared;
  const NetworkShape shape{observation_feature_dim(domain->cluster_count()), 8, 8, kLavaActionCount};
  std::vector<ShieldedAgent> agents;
  for (std::size_t i = 0; i < 8; ++i) agents.emplace_back(PpoAgent(shape, PpoConfig{}, i, 28), &shared);

  LavaConfig lava;
  lava.assignment = {LavaType::kRed};
  const auto inst = domain->instance_from(lava);
  LavaGridEnv env(domain);
  env.begin(inst, 0);
  // (2,2) facing east is one step west of the lava tile at (3,2).
  const StateKey key = env.key_for({2, 2}, Direction::kEast);
  BasicTransition<Observation> t;
  t.state_key = key;
  t.action = ActionId(2);
  t.safety_label = 0;
  ASSERT_TRUE(agents[7].mask_for(key)[2]);
  ASSERT_TRUE(agents[3].record_mistakes(t, 0, 0));
  const auto mask = agents[7].mask_for(key);
  EXPECT_EQ(mask, (std::vector<std::uint8_t>{1, 1, 0}));
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    EXPECT_NE(agents[7].sample_action(encode_observation(env.observe(), 6.0), key, &rng).action, ActionId(2));
  }
}

TEST(GoalTest, KeysSeparateGoalsAndPersistAcrossEpisodes) {
  auto domain = std::make_shared<const LavaGridDomain>(named_layout("goal3").with_schedule(
      std::vector<double>(named_layout("goal3").lava_eligible().size(), 0.0)));
  LavaGridEnv env(domain);
  const auto inst = domain->empty_instance();
  env.begin(inst, 0);
  const auto k0 = env.key_for({3, 2}, Direction::kSouth);
  env.begin(inst, 1);
  const auto k1 = env.key_for({3, 2}, Direction::kSouth);
  EXPECT_NE(k0, k1);
  env.begin(inst, 0);
  EXPECT_EQ(env.key_for({3, 2}, Direction::kSouth), k0);

  TabularShield shield;
  shield.record({k0, ActionId(2)});
  EXPECT_FALSE(shield.query({k0, ActionId(2)}));
  EXPECT_TRUE(shield.query({k1, ActionId(2)}));
}

TEST(GoalTest, FlatScheduleFrequency) {
  auto layout = named_layout("goal3");
  const LavaGridDomain domain(layout.with_schedule(flat_schedule(layout, 0.005)));
  Rng rng(99);
  std::size_t lava = 0, tiles = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto inst = domain.sample_instance(rng);
    lava += inst.config.lava_count();
    tiles += inst.config.assignment.size();
  }
  const double freq = static_cast<double>(lava) / static_cast<double>(tiles);
  const double se = std::sqrt(0.005 * 0.995 / static_cast<double>(tiles));
  EXPECT_NEAR(freq, 0.005, 4.0 * se);
}

TEST(GoalTest, RunProducesEvalRows) {
  ExperimentConfig cfg;
  cfg.protocol = "goal";
  cfg.layout = "goal3";
  cfg.schedule = "flat";
  cfg.train_steps = 3000;
  cfg.eval_interval = 1000;
  cfg.eval_episodes = 4;
  cfg.agent.segment = 256;
  cfg.agent.hidden = 16;
  const auto art = run_goal_conditioned(cfg, 1);
  EXPECT_GE(art.total_steps, 3000u);
  ASSERT_EQ(art.eval.size(), 9u);
  for (std::size_t i = 0; i < art.eval.size(); ++i) {
    EXPECT_EQ(art.eval[i].goal, i % 3);
    EXPECT_GE(art.eval[i].env_steps, 1000u * (i / 3 + 1));
    EXPECT_GE(art.eval[i].success_rate, 0.0);
    EXPECT_LE(art.eval[i].success_rate, 1.0);
  }
  std::set<std::size_t> goals;
  for (const auto& e : art.episodes) goals.insert(e.goal);
  EXPECT_EQ(goals.size(), 3u);
  EXPECT_EQ(art.total_repeated(), 0u);
  const auto again = run_goal_conditioned(cfg, 1);
  EXPECT_EQ(eval_csv(art.eval), eval_csv(again.eval));
}

// Mean return of the policy that only ever turns, computed by stepping the
// environment directly.
double always_turn_return(const LavaGridDomain& domain) {
  LavaGridEnv env(std::make_shared<const LavaGridDomain>(domain));
  env.begin(domain.empty_instance(), 0);
  double ret = 0.0;
  while (!env.done()) ret += env.step(ActionId(0)).reward;
  return ret;
}

TEST(PpoSanityTest, PlainPpoBeatsAlwaysTurnOnOpenGrid) {
  ExperimentConfig cfg;
  cfg.layout = "open5";
  cfg.schedule = "none";
  cfg.algorithm = "ppo";
  cfg.episodes = 2000;
  cfg.agent.segment = 512;
  cfg.agent.learning_rate = 0.002;
  cfg.agent.entropy_coef = 0.003;
  const double baseline = always_turn_return(*make_domain(cfg));
  ASSERT_LT(baseline, 0.0);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto art = run_single(cfg, seed);
    double last = 0.0;
    for (std::size_t e = art.metrics.size() - 50; e < art.metrics.size(); ++e) last += art.metrics[e].mean_return;
    EXPECT_GT(last / 50.0, baseline) << "seed " << seed;
  }
}

}  // namespace
}  // namespace shieldbench
