#pragma once

// Core POMDP-with-catastrophic-actions contract shared by every environment:
// actions, canonical state keys, observations carrying a safety label channel.

#include <array>
#include <compare>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace shieldbench {

struct ActionId {
  std::uint8_t index = 0;

  constexpr ActionId() = default;
  constexpr explicit ActionId(std::size_t i) : index(static_cast<std::uint8_t>(i)) {}

  constexpr std::size_t value() const noexcept { return index; }
  friend constexpr auto operator<=>(ActionId, ActionId) = default;
};

/// Thrown when a caller breaks an environment or agent contract, e.g. by
/// stepping an episode that already terminated.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Canonical fixed-width encoding of an environment's discrete state.
///
/// Layout (version 1, all integers little-endian):
///   byte 0      environment tag ('L' LavaGrid, 'C' chain)
///   byte 1      key layout version (1)
///   bytes 2..   environment-specific fields, zero padded to kSize
/// The environment, never the agent, mints keys.
class StateKey {
 public:
  static constexpr std::size_t kSize = 16;
  using Bytes = std::array<std::uint8_t, kSize>;

  constexpr StateKey() = default;
  constexpr explicit StateKey(const Bytes& bytes) : bytes_(bytes) {}

  const Bytes& bytes() const noexcept { return bytes_; }
  std::uint8_t tag() const noexcept { return bytes_[0]; }

  friend auto operator<=>(const StateKey&, const StateKey&) = default;

  std::string hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * kSize);
    for (auto b : bytes_) {
      out.push_back(kDigits[b >> 4]);
      out.push_back(kDigits[b & 0xf]);
    }
    return out;
  }

 private:
  Bytes bytes_{};
};

/// Little-endian field writer for StateKey payloads.
class StateKeyBuilder {
 public:
  StateKeyBuilder(std::uint8_t tag, std::uint8_t version = 1) {
    bytes_[0] = tag;
    bytes_[1] = version;
  }

  StateKeyBuilder& u8(std::uint8_t v) { return put(v, 1); }
  StateKeyBuilder& u16(std::uint16_t v) { return put(v, 2); }
  StateKeyBuilder& u32(std::uint32_t v) { return put(v, 4); }

  StateKey build() const { return StateKey(bytes_); }

 private:
  StateKeyBuilder& put(std::uint64_t v, std::size_t width) {
    if (cursor_ + width > StateKey::kSize) {
      throw std::length_error("state key payload exceeds 16 bytes");
    }
    for (std::size_t i = 0; i < width; ++i) {
      bytes_[cursor_++] = static_cast<std::uint8_t>(v >> (8 * i));
    }
    return *this;
  }

  StateKey::Bytes bytes_{};
  std::size_t cursor_ = 2;
};

/// Little-endian field reader matching StateKeyBuilder.
class StateKeyReader {
 public:
  explicit StateKeyReader(const StateKey& key) : bytes_(key.bytes()) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }

 private:
  std::uint64_t get(std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(bytes_[cursor_++]) << (8 * i);
    }
    return v;
  }

  StateKey::Bytes bytes_;
  std::size_t cursor_ = 2;
};

enum class CellCode : std::uint8_t { kOutOfBounds = 0, kFloor = 1, kWall = 2 };
inline constexpr std::size_t kCellCodeCount = 3;
inline constexpr int kViewSize = 5;

/// Egocentric grid observation. Window row 0 is the row farthest ahead,
/// row kViewSize-1 holds the agent (centre column). goal_delta is the goal
/// offset in the agent frame: {cells ahead, cells to the right}.
struct Observation {
  std::array<CellCode, kViewSize * kViewSize> window{};
  std::array<std::int32_t, 2> goal_delta{};
  std::uint32_t instance_index = 0;
  std::uint32_t instance_count = 1;

  CellCode at(int row, int col) const { return window[row * kViewSize + col]; }

  std::vector<std::uint8_t> instance_onehot() const {
    std::vector<std::uint8_t> v(instance_count, 0);
    v.at(instance_index) = 1;
    return v;
  }

  friend bool operator==(const Observation&, const Observation&) = default;
};

/// One environment step. safety_label is the exposed L_phi(s, a): 1 = safe.
template <class Obs>
struct BasicTransition {
  StateKey state_key;
  Obs obs;
  ActionId action;
  double reward = 0.0;
  Obs next_obs;
  bool terminal = false;
  bool truncated = false;  // time limit hit on a non-terminal step
  std::uint8_t safety_label = 1;
};

using Transition = BasicTransition<Observation>;

struct EnvSpec {
  std::size_t action_count = 0;
  double discount = 1.0;
  std::size_t feature_dim = 0;  // length of the flattened observation

  void validate() const {
    if (action_count < 2) throw std::invalid_argument("action_count must be >= 2");
    if (!(discount > 0.0 && discount <= 1.0)) {
      throw std::invalid_argument("discount must lie in (0, 1]");
    }
  }
};

template <class E>
concept PomdpEnvironment = requires(E env, const E cenv, std::uint64_t seed, ActionId a) {
  typename E::observation_type;
  { env.reset(seed) } -> std::same_as<typename E::observation_type>;
  { env.step(a) } -> std::same_as<BasicTransition<typename E::observation_type>>;
  { cenv.state_key() } -> std::same_as<StateKey>;
  { cenv.spec() } -> std::same_as<EnvSpec>;
  { cenv.done() } -> std::same_as<bool>;
};

}  // namespace shieldbench
