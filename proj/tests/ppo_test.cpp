#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "shieldbench/ppo.hpp"
#include "shieldbench/rng.hpp"
#include "shieldbench/shield.hpp"

namespace shieldbench {
namespace {

std::vector<std::uint8_t> bytes(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

// Sum_{i>=0} (gamma lambda)^i delta_{t+i}, evaluated directly per t.
std::vector<double> gae_oracle(const std::vector<double>& r, const std::vector<double>& v,
                               const std::vector<double>& nv, const std::vector<std::uint8_t>& term,
                               const std::vector<std::uint8_t>& ends, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> delta(n), out(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) delta[t] = r[t] + (term[t] ? 0.0 : g * nv[t]) - v[t];
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      out[t] += w * delta[k];
      if (ends[k]) break;
      w *= g * l;
    }
  }
  return out;
}

TEST(GaeTest, SingleTerminalStep) {
  const std::vector<double> r = {1}, v = {0}, nv = {0};
  const auto gae = compute_gae(r, v, nv, bytes({1}), bytes({1}), 0.9, 0.5);
  EXPECT_DOUBLE_EQ(gae.advantages[0], 1.0);
  EXPECT_DOUBLE_EQ(gae.returns[0], 1.0);
}

TEST(GaeTest, TwoStepsUndiscounted) {
  const std::vector<double> r = {0, 1}, v = {0, 0}, nv = {0, 0};
  const auto gae = compute_gae(r, v, nv, bytes({0, 1}), bytes({0, 1}), 1.0, 1.0);
  EXPECT_DOUBLE_EQ(gae.advantages[0], 1.0);
  EXPECT_DOUBLE_EQ(gae.advantages[1], 1.0);
}

TEST(GaeTest, LambdaZeroGivesTdErrors) {
  const std::vector<double> r = {0.5, -1, 2}, v = {0.1, 0.2, 0.3}, nv = {0.2, 0.3, 0.7};
  const auto gae = compute_gae(r, v, nv, bytes({0, 0, 0}), bytes({0, 0, 1}), 0.9, 0.0);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(gae.advantages[t], r[t] + 0.9 * nv[t] - v[t], 1e-15);
}

TEST(GaeTest, MatchesDirectSumOnRandomSegments) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(30);
    std::vector<double> r(n), v(n), nv(n);
    std::vector<std::uint8_t> term(n), ends(n);
    for (std::size_t t = 0; t < n; ++t) {
      r[t] = rng.uniform(-2, 2);
      v[t] = rng.uniform(-1, 1);
      term[t] = rng.uniform() < 0.1;
      ends[t] = term[t] || rng.uniform() < 0.05;
    }
    ends[n - 1] = 1;
    for (std::size_t t = 0; t + 1 < n; ++t) nv[t] = ends[t] ? rng.uniform(-1, 1) : v[t + 1];
    nv[n - 1] = rng.uniform(-1, 1);
    const double g = rng.uniform(0.5, 1.0), l = rng.uniform(0.0, 1.0);
    const auto gae = compute_gae(r, v, nv, term, ends, g, l);
    const auto want = gae_oracle(r, v, nv, term, ends, g, l);
    for (std::size_t t = 0; t < n; ++t) {
      EXPECT_NEAR(gae.advantages[t], want[t], 1e-12);
      EXPECT_NEAR(gae.returns[t], want[t] + v[t], 1e-12);
    }
  }
}

TEST(GaeTest, RejectsOpenSegment) {
  const std::vector<double> r = {0}, v = {0}, nv = {0};
  EXPECT_THROW(compute_gae(r, v, nv, bytes({0}), bytes({0}), 0.9, 0.9), std::invalid_argument);
}

TEST(NormalizeAdvantagesTest, ZeroMeanUnitStdAndConstantGuard) {
  std::vector<double> a = {1, 2, 3, 4};
  normalize_advantages(a);
  double m = 0, s = 0;
  for (double x : a) m += x / 4;
  for (double x : a) s += (x - m) * (x - m) / 4;
  EXPECT_NEAR(m, 0, 1e-15);
  EXPECT_NEAR(s, 1, 1e-12);
  std::vector<double> c = {2, 2, 2};
  normalize_advantages(c);
  for (double x : c) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(MaskedLogSoftmaxTest, RenormalizesOverAllowedActions) {
  const std::vector<double> z = {1.0, 2.0, 3.0};
  const auto lp = masked_log_softmax(z, bytes({1, 0, 1}));
  EXPECT_TRUE(std::isinf(lp[1]));
  EXPECT_NEAR(std::exp(lp[0]) + std::exp(lp[2]), 1.0, 1e-15);
  EXPECT_NEAR(lp[2] - lp[0], 2.0, 1e-15);
  const auto big = masked_log_softmax(std::vector<double>{1000.0, 0.0}, bytes({1, 1}));
  EXPECT_NEAR(big[0], 0.0, 1e-12);
}

struct Problem {
  NetworkShape shape;
  std::vector<double> params;
  std::vector<RolloutStep> steps;
  std::vector<oracle::LossSample> samples;
};

Problem make_problem(std::uint64_t seed, NetworkShape shape, std::size_t batch, const PpoConfig& cfg) {
  Rng rng(seed);
  Problem p{shape, std::vector<double>(shape.param_count()), {}, {}};
  for (auto& v : p.params) v = rng.uniform(-1, 1);
  PolicyNetwork net(shape);
  net.set_params(p.params);
  for (std::size_t i = 0; i < batch; ++i) {
    oracle::LossSample o;
    o.x.assign(shape.inputs, 0.0);
    RolloutStep s;
    for (std::size_t k = 0; k < shape.inputs; ++k) {
      if (rng.uniform() < 0.7) {
        o.x[k] = rng.uniform(-1, 1);
        s.features.add(k, o.x[k]);
      }
    }
    o.mask.assign(shape.actions, 1);
    if (shape.actions > 2 && rng.uniform() < 0.5) o.mask[rng.uniform_index(shape.actions)] = 0;
    o.fallback = rng.uniform() < 0.1;
    if (o.fallback) std::fill(o.mask.begin(), o.mask.end(), 0);
    std::vector<std::size_t> allowed;
    for (std::size_t a = 0; a < shape.actions; ++a) {
      if (o.mask[a]) allowed.push_back(a);
    }
    o.action = allowed.empty() ? rng.uniform_index(shape.actions) : allowed[rng.uniform_index(allowed.size())];
    PolicyNetwork::Activations act;
    net.forward(s.features, act);
    // choose ratios away from the clip kinks
    double ratio;
    do {
      ratio = rng.uniform(0.5, 1.6);
    } while (std::abs(ratio - (1 - cfg.clip)) < 1e-3 || std::abs(ratio - (1 + cfg.clip)) < 1e-3);
    const double lp = o.fallback ? std::log(1.0 / static_cast<double>(shape.actions))
                                 : masked_log_softmax(act.logits, o.mask)[o.action];
    o.old_log_prob = o.fallback ? lp : lp - std::log(ratio);
    o.advantage = rng.uniform(-2, 2);
    o.ret = rng.uniform(-2, 2);
    s.mask = o.mask;
    s.fallback = o.fallback;
    s.action = ActionId(o.action);
    s.log_prob = o.old_log_prob;
    s.advantage = o.advantage;
    s.ret = o.ret;
    p.steps.push_back(std::move(s));
    p.samples.push_back(std::move(o));
  }
  return p;
}

// Norm-wise relative error between analytic and central-difference gradients.
double gradient_error(const Problem& p, const PpoConfig& cfg) {
  PolicyNetwork net(p.shape);
  net.set_params(p.params);
  std::vector<const RolloutStep*> batch;
  for (const auto& s : p.steps) batch.push_back(&s);
  std::vector<double> grad(p.params.size());
  const auto terms = ppo_loss(net, batch, cfg, grad);
  const double want = oracle::ppo_loss(p.shape, p.params, p.samples, cfg.clip, cfg.value_coef, cfg.entropy_coef);
  EXPECT_NEAR(terms.total, want, 1e-10);
  double diff2 = 0, norm2 = 0;
  for (std::size_t i = 0; i < p.params.size(); ++i) {
    auto hi = p.params, lo = p.params;
    hi[i] += 1e-6;
    lo[i] -= 1e-6;
    const double fd = (oracle::ppo_loss(p.shape, hi, p.samples, cfg.clip, cfg.value_coef, cfg.entropy_coef) -
                       oracle::ppo_loss(p.shape, lo, p.samples, cfg.clip, cfg.value_coef, cfg.entropy_coef)) /
                      2e-6;
    diff2 += (fd - grad[i]) * (fd - grad[i]);
    norm2 += fd * fd + grad[i] * grad[i];
  }
  return norm2 == 0 ? 0.0 : std::sqrt(diff2 / norm2);
}

TEST(PpoLossTest, GradientMatchesFiniteDifferencesOnProbeNetwork) {
  PpoConfig cfg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = make_problem(seed, NetworkShape{1, 1, 1, 2}, 8, cfg);
    ASSERT_EQ(p.params.size(), 10u);
    EXPECT_LT(gradient_error(p, cfg), 1e-4) << "seed " << seed;
  }
}

TEST(PpoLossTest, EachTermMatchesFiniteDifferences) {
  const std::vector<std::array<double, 2>> coefs = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {0.5, 0.01}};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& [vc, ec] : coefs) {
      PpoConfig cfg;
      cfg.value_coef = vc;
      cfg.entropy_coef = ec;
      const auto p = make_problem(100 + seed, NetworkShape{5, 4, 3, 3}, 12, cfg);
      EXPECT_LT(gradient_error(p, cfg), 1e-4) << "seed " << seed << " vc " << vc << " ec " << ec;
    }
  }
}

TEST(PpoLossTest, ZeroAdvantagesGiveZeroPolicyLoss) {
  PpoConfig cfg;
  auto p = make_problem(7, NetworkShape{3, 3, 3, 3}, 10, cfg);
  for (auto& s : p.steps) s.advantage = 0;
  PolicyNetwork net(p.shape);
  net.set_params(p.params);
  std::vector<const RolloutStep*> batch;
  for (const auto& s : p.steps) batch.push_back(&s);
  EXPECT_DOUBLE_EQ(ppo_loss(net, batch, cfg).policy_loss, 0.0);
}

TEST(PpoLossTest, ClippedContributionAtRatioOnePointFive) {
  PpoConfig cfg;
  cfg.value_coef = 0;
  cfg.entropy_coef = 0;
  PolicyNetwork net(NetworkShape{1, 1, 1, 2});
  std::vector<double> params(10, 0.0);
  net.set_params(params);  // uniform policy, log pi = log 0.5
  RolloutStep s;
  s.features.add(0, 1.0);
  s.mask = {1, 1};
  s.action = ActionId(0);
  s.log_prob = std::log(0.5 / 1.5);  // ratio 1.5
  s.advantage = 2.0;
  const RolloutStep* batch[] = {&s};
  std::vector<double> grad(10);
  const auto t = ppo_loss(net, batch, cfg, grad);
  EXPECT_NEAR(t.policy_loss, -1.2 * 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(t.clip_fraction, 1.0);
  for (double g : grad) EXPECT_DOUBLE_EQ(g, 0.0);
}

PpoAgent small_agent(std::uint64_t seed = 1) {
  PpoConfig cfg;
  cfg.hidden = 8;
  cfg.segment = 16;
  cfg.minibatch = 8;
  return PpoAgent(NetworkShape{6, 8, 8, 3}, cfg, seed, 2);
}

SparseFeatures input(std::size_t i) {
  SparseFeatures x;
  x.add(i, 1.0);
  return x;
}

ShieldKey key(std::uint32_t s, std::size_t a) { return {StateKeyBuilder('T').u32(s).build(), ActionId(a)}; }

TEST(PpoAgentTest, EmptyShieldSamplesFromRawSoftmax) {
  auto agent = small_agent();
  TabularShield shield;
  ShieldedAgent sa(agent, &shield);
  const auto d = sa.sample_action(input(1), key(1, 0).state, nullptr);
  PolicyNetwork::Activations act;
  agent.network().forward(input(1), act);
  const auto want = softmax(act.logits);
  for (std::size_t a = 0; a < 3; ++a) EXPECT_DOUBLE_EQ(d.probs[a], want[a]);
}

TEST(PpoAgentTest, BlockedArgmaxIsNeverSampled) {
  auto agent = small_agent(3);
  PolicyNetwork::Activations act;
  agent.network().forward(input(2), act);
  const auto argmax = static_cast<std::size_t>(std::max_element(act.logits.begin(), act.logits.end()) - act.logits.begin());
  TabularShield shield;
  shield.record(key(9, argmax));
  ShieldedAgent sa(agent, &shield);
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const auto d = sa.sample_action(input(2), key(9, 0).state, &rng);
    ASSERT_NE(d.action.value(), argmax);
    ASSERT_DOUBLE_EQ(d.probs[argmax], 0.0);
  }
  const auto greedy = sa.sample_action(input(2), key(9, 0).state, nullptr);
  const auto best = std::max_element(greedy.probs.begin(), greedy.probs.end()) - greedy.probs.begin();
  EXPECT_EQ(greedy.action.value(), static_cast<std::size_t>(best));
  EXPECT_NEAR(std::exp(greedy.log_prob), greedy.probs[greedy.action.value()], 1e-12);
}

TEST(PpoAgentTest, AllBlockedUsesDefaultPolicy) {
  TabularShield shield;
  for (std::size_t a = 0; a < 3; ++a) shield.record(key(5, a));
  ShieldedAgent sa(small_agent(), &shield, {0.0, 1.0, 0.0});
  Rng rng(1);
  const auto d = sa.sample_action(input(0), key(5, 0).state, &rng);
  EXPECT_TRUE(d.fallback);
  EXPECT_EQ(d.action.value(), 1u);
  EXPECT_DOUBLE_EQ(d.log_prob, 0.0);
}

TEST(PpoAgentTest, NonFiniteLogitsRaiseNumericalError) {
  auto agent = small_agent();
  auto params = agent.network().params();
  params[0] = std::numeric_limits<double>::quiet_NaN();
  const std::vector<std::uint8_t> mask = {1, 1, 1};
  Rng rng(1);
  try {
    agent.decide(input(0), mask, uniform_policy(3), &rng);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("logits"), std::string::npos);
  }
}

TEST(PpoAgentTest, NanRewardAbortsUpdate) {
  auto agent = small_agent();
  Rng rng(2);
  const std::vector<std::uint8_t> mask = {1, 1, 1};
  std::vector<double> before(agent.network().params().begin(), agent.network().params().end());
  for (int i = 0; i < 4; ++i) {
    const auto d = agent.decide(input(i), mask, uniform_policy(3), &rng);
    RolloutStep s;
    s.features = input(i);
    s.mask = mask;
    s.action = d.action;
    s.log_prob = d.log_prob;
    s.value = d.value;
    s.reward = i == 2 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
    agent.store(s);
  }
  agent.end_segment(0.0);
  const auto stats = agent.update(rng);
  EXPECT_TRUE(stats.aborted);
  EXPECT_EQ(agent.buffer_size(), 0u);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), agent.network().params().begin()));
}

TEST(PpoAgentTest, UpdateRaisesProbabilityOfRewardedAction) {
  auto agent = small_agent(5);
  Rng rng(6);
  const std::vector<std::uint8_t> mask = {1, 1, 1};
  auto prob_of_two = [&] { return agent.decide(input(0), mask, uniform_policy(3), nullptr).probs[2]; };
  const double before = prob_of_two();
  for (int round = 0; round < 80; ++round) {
    for (int i = 0; i < 16; ++i) {
      const auto d = agent.decide(input(0), mask, uniform_policy(3), &rng);
      RolloutStep s;
      s.features = input(0);
      s.mask = mask;
      s.action = d.action;
      s.log_prob = d.log_prob;
      s.value = d.value;
      s.reward = d.action.value() == 2 ? 1.0 : 0.0;
      s.terminal = true;
      s.episode_end = true;
      agent.store(s);
    }
    ASSERT_TRUE(agent.buffer_full());
    EXPECT_FALSE(agent.update(rng).aborted);
  }
  EXPECT_GT(prob_of_two(), before + 0.3);
}

TEST(RecordMistakesTest, SafeIsNoOpUnsafeRecords) {
  TabularShield shield;
  ShieldedAgent sa(small_agent(), &shield);
  Transition t;
  t.state_key = key(3, 0).state;
  t.action = ActionId(2);
  t.safety_label = 1;
  EXPECT_FALSE(sa.record_mistakes(t, 0, 0));
  EXPECT_EQ(shield.size(), 0u);
  t.safety_label = 0;
  EXPECT_TRUE(sa.record_mistakes(t, 4, 7));
  EXPECT_FALSE(shield.query(key(3, 2)));
  ASSERT_EQ(sa.mistake_log().size(), 1u);
  EXPECT_EQ(sa.mistake_log()[0].episode, 4u);
  EXPECT_EQ(sa.mistake_log()[0].step, 7u);
  const auto mask = sa.mask_for(key(3, 0).state);
  EXPECT_EQ(mask, (std::vector<std::uint8_t>{1, 1, 0}));
}

TEST(RecordMistakesTest, SharedShieldBlocksOtherAgent) {
  TabularShield shared;
  ShieldedAgent a(small_agent(1), &shared), b(small_agent(2), &shared);
  Transition t;
  t.state_key = key(8, 0).state;
  t.action = ActionId(1);
  t.safety_label = 0;
  a.record_mistakes(t, 0, 3);
  EXPECT_EQ(b.mask_for(t.state_key), (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_TRUE(b.mistake_log().empty());
}

TEST(MistakeLogTest, CsvFormat) {
  const std::vector<MistakeRecord> log = {{1, 2, key(1, 2)}};
  std::ostringstream out;
  write_mistake_log(out, log);
  EXPECT_EQ(out.str(), "episode,step,key\n1,2," + key(1, 2).hex() + "\n");
}

TEST(CheckpointTest, RoundTripAndValidation) {
  auto agent = small_agent(9);
  const auto bytes = serialize_checkpoint(agent.network());
  const auto net = deserialize_checkpoint(bytes);
  EXPECT_EQ(net.shape(), agent.network().shape());
  EXPECT_TRUE(std::equal(net.params().begin(), net.params().end(), agent.network().params().begin()));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SPPO");
  EXPECT_EQ(bytes.size(), 4u + 2 + 5 * 8 + 8 * agent.network().param_count());
  for (std::size_t len : {0ul, 5ul, 20ul, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(std::span(bytes.data(), len)), FormatError) << len;
  }
  auto bad = bytes;
  bad[4] = 7;
  EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
}

}  // namespace
}  // namespace shieldbench
