#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "shieldbench/chain_env.hpp"
#include "shieldbench/pomdp.hpp"
#include "shieldbench/rng.hpp"

namespace shieldbench {
namespace {

static_assert(PomdpEnvironment<ChainEnv>);

TEST(StateKeyTest, BuilderWritesLittleEndianAfterHeader) {
  const StateKey key = StateKeyBuilder('L').u32(0x01020304).u16(0xa0b0).u8(7).build();
  const auto& b = key.bytes();
  EXPECT_EQ(b[0], 'L');
  EXPECT_EQ(b[1], 1);
  EXPECT_EQ(b[2], 0x04);
  EXPECT_EQ(b[3], 0x03);
  EXPECT_EQ(b[4], 0x02);
  EXPECT_EQ(b[5], 0x01);
  EXPECT_EQ(b[6], 0xb0);
  EXPECT_EQ(b[7], 0xa0);
  EXPECT_EQ(b[8], 7);
  for (std::size_t i = 9; i < StateKey::kSize; ++i) EXPECT_EQ(b[i], 0) << i;
  EXPECT_EQ(key.hex(), "4c0104030201b0a00700000000000000");
}

TEST(StateKeyTest, ReaderRoundTrips) {
  const StateKey key = StateKeyBuilder('L').u32(4095).u16(6).u16(5).u8(3).u8(2).build();
  StateKeyReader r(key);
  EXPECT_EQ(r.u32(), 4095u);
  EXPECT_EQ(r.u16(), 6u);
  EXPECT_EQ(r.u16(), 5u);
  EXPECT_EQ(r.u8(), 3u);
  EXPECT_EQ(r.u8(), 2u);
}

TEST(StateKeyTest, OverflowThrows) {
  StateKeyBuilder b('C');
  b.u32(1).u32(2).u32(3).u16(4);
  EXPECT_THROW(b.u8(1), std::length_error);
}

TEST(StateKeyTest, OrderingIsLexicographicOnBytes) {
  const auto a = StateKeyBuilder('C').u8(1).build();
  const auto b = StateKeyBuilder('C').u8(2).build();
  const auto c = StateKeyBuilder('L').u8(0).build();
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
}

TEST(EnvSpecTest, Validate) {
  EXPECT_NO_THROW((EnvSpec{3, 0.99, 10}.validate()));
  EXPECT_THROW((EnvSpec{1, 0.99, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((EnvSpec{3, 0.0, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((EnvSpec{3, 1.5, 10}.validate()), std::invalid_argument);
}

TEST(ChainEnvTest, FirstActionIsTheOnlyLabelledMistake) {
  ChainEnv env(5);
  env.reset(0);
  std::vector<std::uint8_t> labels;
  std::vector<double> rewards;
  while (!env.done()) {
    auto t = env.step(ActionId(1));
    labels.push_back(t.safety_label);
    rewards.push_back(t.reward);
  }
  EXPECT_EQ(labels, (std::vector<std::uint8_t>{0, 1, 1, 1}));
  EXPECT_EQ(rewards, (std::vector<double>{0, 0, 0, -1000}));
}

TEST(ChainEnvTest, StepAfterTerminationIsContractViolation) {
  ChainEnv env(2);
  env.reset(0);
  auto t = env.step(ActionId(0));
  EXPECT_TRUE(t.terminal);
  EXPECT_THROW(env.step(ActionId(0)), ContractViolation);
  env.reset(0);
  EXPECT_NO_THROW(env.step(ActionId(0)));
}

TEST(ChainEnvTest, LabelsMatchCatastrophicSet) {
  ChainEnv env(6);
  const auto cat = env.catastrophic_set();
  const std::set<ShieldKey> cat_set(cat.begin(), cat.end());
  Rng rng(3);
  for (int ep = 0; ep < 20; ++ep) {
    env.reset(static_cast<std::uint64_t>(ep));
    while (!env.done()) {
      const ActionId a(rng.uniform_index(2));
      const StateKey key = env.state_key();
      auto t = env.step(a);
      EXPECT_EQ(t.safety_label == 0, cat_set.contains(ShieldKey{key, a}));
    }
  }
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(RngTest, UniformIndexInRangeAndRoughlyUniform) {
  Rng rng(7);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) {
    const auto k = rng.uniform_index(5);
    ASSERT_LT(k, 5u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c / 50000.0, 0.2, 0.01);
}

TEST(RngTest, CategoricalFollowsWeights) {
  Rng rng(11);
  const std::vector<double> w = {0.7, 0.0, 0.3};
  std::vector<int> counts(3, 0);
  for (int i = 0; i < 40000; ++i) ++counts[rng.categorical(w)];
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[0] / 40000.0, 0.7, 0.01);
}

TEST(RngTest, DeriveSeedSeparatesStreams) {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t base = 0; base < 50; ++base) {
    for (std::uint64_t stream = 0; stream < 4; ++stream) seeds.insert(derive_seed(base, stream));
  }
  EXPECT_EQ(seeds.size(), 200u);
}

}  // namespace
}  // namespace shieldbench
