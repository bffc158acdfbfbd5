#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <numeric>
#include <shared_mutex>
#include <span>
#include <string>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "shieldbench/pomdp.hpp"
#include "shieldbench/rng.hpp"

namespace shieldbench {

/// A (state, action) pair. Ordered lexicographically by state bytes, then action.
struct ShieldKey {
  static constexpr std::size_t kEncodedSize = StateKey::kSize + 1;

  StateKey state;
  ActionId action;

  friend auto operator<=>(const ShieldKey&, const ShieldKey&) = default;

  std::array<std::uint8_t, kEncodedSize> encode() const {
    std::array<std::uint8_t, kEncodedSize> out{};
    std::copy(state.bytes().begin(), state.bytes().end(), out.begin());
    out[StateKey::kSize] = action.index;
    return out;
  }

  static ShieldKey decode(std::span<const std::uint8_t, kEncodedSize> in) {
    StateKey::Bytes bytes{};
    std::copy(in.begin(), in.begin() + StateKey::kSize, bytes.begin());
    return ShieldKey{StateKey(bytes), ActionId(in[StateKey::kSize])};
  }

  std::string hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out = state.hex();
    out.push_back(kDigits[action.index >> 4]);
    out.push_back(kDigits[action.index & 0xf]);
    return out;
  }
};

/// Seeded 64-bit hash over the encoded key, consumed in 8-byte words.
inline std::uint64_t hash_key(const ShieldKey& key, std::uint64_t seed) noexcept {
  const auto bytes = key.encode();
  std::uint64_t h = mix64(seed);
  for (std::size_t off = 0; off < bytes.size(); off += 8) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < 8 && off + i < bytes.size(); ++i) {
      word |= static_cast<std::uint64_t>(bytes[off + i]) << (8 * i);
    }
    h = mix64(h ^ word) * 0x9fb21c651e98df25ULL;
  }
  return mix64(h ^ bytes.size());
}

struct ShieldKeyHash {
  std::size_t operator()(const ShieldKey& key) const noexcept {
    return static_cast<std::size_t>(hash_key(key, 0x5eed));
  }
};

enum class ShieldVariant : std::uint8_t {
  kTabular = 1,
  kBloom = 2,
  kBounded = 3,
  kParametric = 4,
};

/// A shield is a binary function over (state, action): query() returns true
/// when the pair is considered safe.
class Shield {
 public:
  virtual ~Shield() = default;

  virtual ShieldVariant variant() const noexcept = 0;
  [[nodiscard]] virtual bool query(const ShieldKey& key) = 0;
  virtual void record(const ShieldKey& key) = 0;
  virtual std::size_t size() const = 0;
};

/// Exact set of discovered catastrophic pairs. Thread-safe: queries take a
/// shared lock, records an exclusive one.
class TabularShield final : public Shield {
 public:
  TabularShield() = default;
  TabularShield(const TabularShield& other) : entries_(other.snapshot_set()) {
    insertion_counter_ = other.insertion_counter();
  }

  ShieldVariant variant() const noexcept override { return ShieldVariant::kTabular; }

  bool query(const ShieldKey& key) override {
    std::shared_lock lock(mutex_);
    return !entries_.contains(key);
  }

  void record(const ShieldKey& key) override {
    std::unique_lock lock(mutex_);
    if (entries_.insert(key).second) ++insertion_counter_;
  }

  bool contains(const ShieldKey& key) const {
    std::shared_lock lock(mutex_);
    return entries_.contains(key);
  }

  std::size_t size() const override {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  std::uint64_t insertion_counter() const {
    std::shared_lock lock(mutex_);
    return insertion_counter_;
  }

  /// Entries in ascending key order.
  std::vector<ShieldKey> entries() const {
    std::shared_lock lock(mutex_);
    std::vector<ShieldKey> out(entries_.begin(), entries_.end());
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::unordered_set<ShieldKey, ShieldKeyHash> snapshot_set() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  mutable std::shared_mutex mutex_;
  std::unordered_set<ShieldKey, ShieldKeyHash> entries_;
  std::uint64_t insertion_counter_ = 0;
};

/// Tabular shield holding at most `capacity` keys; the least recently
/// queried-or-recorded key is evicted first. Single-owner.
class BoundedShield final : public Shield {
 public:
  explicit BoundedShield(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("bounded shield capacity must be positive");
  }

  ShieldVariant variant() const noexcept override { return ShieldVariant::kBounded; }

  bool query(const ShieldKey& key) override {
    auto it = index_.find(key);
    if (it == index_.end()) return true;
    touch(it->second);
    return false;
  }

  void record(const ShieldKey& key) override {
    if (auto it = index_.find(key); it != index_.end()) {
      touch(it->second);
      return;
    }
    if (order_.size() == capacity_) {
      index_.erase(order_.front().key);
      order_.pop_front();
    }
    order_.push_back({key, ++clock_});
    index_.emplace(key, std::prev(order_.end()));
  }

  std::size_t size() const override { return order_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }

  /// Keys from least to most recently touched.
  std::vector<ShieldKey> entries_by_recency() const {
    std::vector<ShieldKey> out;
    out.reserve(order_.size());
    for (const auto& e : order_) out.push_back(e.key);
    return out;
  }

 private:
  struct Entry {
    ShieldKey key;
    std::uint64_t last_touch;
  };

  void touch(std::list<Entry>::iterator it) {
    it->last_touch = ++clock_;
    order_.splice(order_.end(), order_, it);
  }

  std::size_t capacity_;
  std::uint64_t clock_ = 0;
  std::list<Entry> order_;
  std::unordered_map<ShieldKey, std::list<Entry>::iterator, ShieldKeyHash> index_;
};

struct BloomDimensions {
  std::uint64_t bits = 0;    // m
  std::uint64_t hashes = 0;  // k
  friend bool operator==(const BloomDimensions&, const BloomDimensions&) = default;
};

/// Standard sizing: m = ceil(-n ln p / (ln 2)^2), k = max(1, round(m/n ln 2)).
inline BloomDimensions bloom_dimensions(std::uint64_t expected_n, double target_fp) {
  if (expected_n < 1) throw std::invalid_argument("expected_n must be >= 1");
  if (!(target_fp > 0.0 && target_fp < 1.0)) {
    throw std::invalid_argument("target false-positive rate must lie in (0, 1)");
  }
  const double ln2 = std::log(2.0);
  const double n = static_cast<double>(expected_n);
  const auto m = static_cast<std::uint64_t>(std::ceil(-n * std::log(target_fp) / (ln2 * ln2)));
  const auto k = static_cast<std::uint64_t>(
      std::max(1.0, std::round(static_cast<double>(m) / n * ln2)));
  return {m, k};
}

/// Bloom-filter shield: no false negatives, false positives at roughly
/// (1 - e^{-kn/m})^k. Bit positions use double hashing h1 + i*h2 (mod m).
/// Thread-safe: bits are set with atomic fetch_or.
class BloomShield final : public Shield {
 public:
  static constexpr std::uint64_t kSeedA = 0xb10011;
  static constexpr std::uint64_t kSeedB = 0xf117e5;

  BloomShield(std::uint64_t expected_n, double target_fp)
      : BloomShield(bloom_dimensions(expected_n, target_fp), target_fp) {}

  explicit BloomShield(BloomDimensions dims, double target_fp = 0.0)
      : bits_(dims.bits), hashes_(dims.hashes), target_fp_(target_fp),
        words_(std::make_unique<std::atomic<std::uint64_t>[]>(word_count(dims.bits))) {
    if (dims.bits == 0 || dims.hashes == 0) throw std::invalid_argument("bloom m and k must be positive");
    for (std::size_t i = 0; i < word_count(bits_); ++i) words_[i].store(0, std::memory_order_relaxed);
  }

  ShieldVariant variant() const noexcept override { return ShieldVariant::kBloom; }

  bool query(const ShieldKey& key) override {
    bool all_set = true;
    for_each_position(key, [&](std::uint64_t pos) {
      const auto word = words_[pos >> 6].load(std::memory_order_acquire);
      all_set = all_set && ((word >> (pos & 63)) & 1U);
    });
    return !all_set;
  }

  void record(const ShieldKey& key) override {
    for_each_position(key, [&](std::uint64_t pos) {
      words_[pos >> 6].fetch_or(std::uint64_t{1} << (pos & 63), std::memory_order_acq_rel);
    });
    inserted_.fetch_add(1, std::memory_order_relaxed);
  }

  std::size_t size() const override { return inserted_.load(std::memory_order_relaxed); }

  std::uint64_t bit_count() const noexcept { return bits_; }
  std::uint64_t hash_count() const noexcept { return hashes_; }
  std::uint64_t inserted() const noexcept { return inserted_.load(std::memory_order_relaxed); }
  double target_fp() const noexcept { return target_fp_; }

  /// Expected false-positive rate at the current fill.
  double expected_fp() const {
    const double k = static_cast<double>(hashes_);
    return std::pow(1.0 - std::exp(-k * static_cast<double>(inserted()) / static_cast<double>(bits_)), k);
  }

  bool bit(std::uint64_t pos) const {
    return (words_[pos >> 6].load(std::memory_order_acquire) >> (pos & 63)) & 1U;
  }

  std::uint64_t popcount() const {
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < word_count(bits_); ++i) {
      total += static_cast<std::uint64_t>(std::popcount(words_[i].load(std::memory_order_relaxed)));
    }
    return total;
  }

  /// Used by deserialization, before the shield is shared.
  void restore(std::span<const std::uint8_t> packed_bits, std::uint64_t inserted) {
    for (std::uint64_t pos = 0; pos < bits_; ++pos) {
      if ((packed_bits[pos >> 3] >> (pos & 7)) & 1U) {
        words_[pos >> 6].fetch_or(std::uint64_t{1} << (pos & 63), std::memory_order_relaxed);
      }
    }
    inserted_.store(inserted, std::memory_order_relaxed);
  }

 private:
  static std::size_t word_count(std::uint64_t bits) { return static_cast<std::size_t>((bits + 63) / 64); }

  template <class F>
  void for_each_position(const ShieldKey& key, F&& f) const {
    const std::uint64_t a = hash_key(key, kSeedA) % bits_;
    std::uint64_t b = hash_key(key, kSeedB) % bits_;
    if (b == 0) b = 1;
    std::uint64_t pos = a;
    for (std::uint64_t i = 0; i < hashes_; ++i) {
      f(pos);
      pos += b;
      if (pos >= bits_) pos -= bits_;
    }
  }

  std::uint64_t bits_;
  std::uint64_t hashes_;
  double target_fp_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> words_;
  std::atomic<std::uint64_t> inserted_{0};
};

inline constexpr double kDistributionTolerance = 1e-9;

/// Applies a shield mask to a policy distribution:
///   pi(a) * mask(a) / Z        if some action is safe,
///   default_policy             otherwise,
/// with Z = sum_a pi(a) mask(a). If Z underflows to zero while safe actions
/// exist, mass is spread uniformly over the safe actions instead.
inline std::vector<double> apply_shield(std::span<const double> policy_probs,
                                        std::span<const std::uint8_t> mask,
                                        std::span<const double> default_policy) {
  const std::size_t n = policy_probs.size();
  if (mask.size() != n || default_policy.size() != n) {
    throw std::invalid_argument("apply_shield: probs, mask and default policy differ in length");
  }
  auto check_distribution = [](std::span<const double> p, const char* what) {
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw std::invalid_argument(std::string("apply_shield: negative entry in ") + what);
      s += v;
    }
    if (std::abs(s - 1.0) > kDistributionTolerance) {
      throw std::invalid_argument(std::string("apply_shield: ") + what + " does not sum to 1");
    }
  };
  check_distribution(policy_probs, "policy_probs");
  check_distribution(default_policy, "default_policy");

  std::vector<double> out(n, 0.0);
  std::size_t safe_count = 0;
  double z = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    if (mask[a]) {
      ++safe_count;
      z += policy_probs[a];
    }
  }
  if (safe_count == 0) return {default_policy.begin(), default_policy.end()};
  if (safe_count == n) return {policy_probs.begin(), policy_probs.end()};
  if (z <= 0.0) {
    for (std::size_t a = 0; a < n; ++a) out[a] = mask[a] ? 1.0 / static_cast<double>(safe_count) : 0.0;
    return out;
  }
  for (std::size_t a = 0; a < n; ++a) out[a] = mask[a] ? policy_probs[a] / z : 0.0;
  return out;
}

/// Uniform distribution over `n` actions.
inline std::vector<double> uniform_policy(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

}  // namespace shieldbench

template <>
struct std::hash<shieldbench::ShieldKey> {
  std::size_t operator()(const shieldbench::ShieldKey& k) const noexcept {
    return shieldbench::ShieldKeyHash{}(k);
  }
};
