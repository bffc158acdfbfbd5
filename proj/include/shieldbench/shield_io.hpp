#pragma once

// Shield file format, version 1 (all integers little-endian):
//
//   "SHLD" | u16 version | u8 variant | payload
//
//   tabular    (1): u64 count | count x 17-byte keys, ascending
//   bloom      (2): u64 m | u64 k | u64 n | ceil(m/8) bytes, bit i at byte i/8, bit i%8
//   bounded    (3): u64 capacity | u64 count | count x 17-byte keys, least recent first
//   parametric (4): u64 action_count | f64 threshold | u64 weight_count | weights f64 | bias f64
//
// A key is the 16 StateKey bytes followed by the action byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shieldbench/parametric_shield.hpp"
#include "shieldbench/shield.hpp"

namespace shieldbench {

inline constexpr std::uint16_t kShieldFormatVersion = 1;
inline constexpr char kShieldMagic[4] = {'S', 'H', 'L', 'D'};

class ShieldFormatError : public std::runtime_error {
 public:
  ShieldFormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary format errors outside shield files (checkpoints) use the same type.
using FormatError = ShieldFormatError;

namespace detail {

class ByteWriter {
 public:
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint64_t u64(const char* what) { return le(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(le(8, what)); }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  void expect_end() const {
    if (pos_ != in_.size()) throw ShieldFormatError("trailing bytes after shield payload", pos_);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw ShieldFormatError(std::string("truncated stream while reading ") + what, pos_);
    }
  }
  std::uint64_t le(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline void write_keys(ByteWriter& w, const std::vector<ShieldKey>& keys) {
  for (const auto& k : keys) w.raw(k.encode());
}

inline std::vector<ShieldKey> read_keys(ByteReader& r, std::uint64_t count) {
  if (count > r.remaining() / ShieldKey::kEncodedSize) {
    throw ShieldFormatError("key count exceeds stream length", r.offset());
  }
  std::vector<ShieldKey> keys;
  keys.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto bytes = r.raw(ShieldKey::kEncodedSize, "key");
    keys.push_back(ShieldKey::decode(bytes.first<ShieldKey::kEncodedSize>()));
  }
  return keys;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Shield& shield) {
  detail::ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kShieldMagic), 4));
  w.u16(kShieldFormatVersion);
  w.u8(static_cast<std::uint8_t>(shield.variant()));
  switch (shield.variant()) {
    case ShieldVariant::kTabular: {
      const auto keys = dynamic_cast<const TabularShield&>(shield).entries();
      w.u64(keys.size());
      detail::write_keys(w, keys);
      break;
    }
    case ShieldVariant::kBloom: {
      const auto& bloom = dynamic_cast<const BloomShield&>(shield);
      w.u64(bloom.bit_count());
      w.u64(bloom.hash_count());
      w.u64(bloom.inserted());
      std::vector<std::uint8_t> packed((bloom.bit_count() + 7) / 8, 0);
      for (std::uint64_t pos = 0; pos < bloom.bit_count(); ++pos) {
        if (bloom.bit(pos)) packed[pos >> 3] |= static_cast<std::uint8_t>(1U << (pos & 7));
      }
      w.raw(packed);
      break;
    }
    case ShieldVariant::kBounded: {
      const auto& bounded = dynamic_cast<const BoundedShield&>(shield);
      const auto keys = bounded.entries_by_recency();
      w.u64(bounded.capacity());
      w.u64(keys.size());
      detail::write_keys(w, keys);
      break;
    }
    case ShieldVariant::kParametric: {
      const auto& p = dynamic_cast<const ParametricShield&>(shield);
      w.u64(p.action_count());
      w.f64(p.threshold());
      w.u64(p.feature_dim());
      for (double v : p.weights()) w.f64(v);
      w.f64(p.bias());
      break;
    }
  }
  return w.take();
}

inline std::unique_ptr<Shield> deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), kShieldMagic, 4) != 0) throw ShieldFormatError("bad magic, expected SHLD", 0);
  const std::size_t version_offset = r.offset();
  if (const auto version = r.u16("version"); version != kShieldFormatVersion) {
    throw ShieldFormatError("unsupported shield format version " + std::to_string(version), version_offset);
  }
  const std::size_t tag_offset = r.offset();
  const auto tag = r.u8("variant tag");

  std::unique_ptr<Shield> out;
  switch (static_cast<ShieldVariant>(tag)) {
    case ShieldVariant::kTabular: {
      const auto count = r.u64("entry count");
      auto keys = detail::read_keys(r, count);
      auto shield = std::make_unique<TabularShield>();
      for (const auto& k : keys) shield->record(k);
      if (shield->size() != keys.size()) throw ShieldFormatError("duplicate keys in tabular payload", tag_offset + 1);
      out = std::move(shield);
      break;
    }
    case ShieldVariant::kBloom: {
      const auto m = r.u64("bit count");
      const auto k = r.u64("hash count");
      const auto n = r.u64("inserted count");
      if (m == 0 || k == 0) throw ShieldFormatError("bloom m and k must be positive", tag_offset + 1);
      if ((m + 7) / 8 > r.remaining()) throw ShieldFormatError("truncated stream while reading bloom bits", r.offset());
      auto packed = r.raw((m + 7) / 8, "bloom bits");
      auto shield = std::make_unique<BloomShield>(BloomDimensions{m, k});
      shield->restore(packed, n);
      out = std::move(shield);
      break;
    }
    case ShieldVariant::kBounded: {
      const auto capacity = r.u64("capacity");
      const auto count = r.u64("entry count");
      if (capacity == 0 || count > capacity) throw ShieldFormatError("bounded shield count exceeds capacity", tag_offset + 1);
      auto keys = detail::read_keys(r, count);
      auto shield = std::make_unique<BoundedShield>(capacity);
      for (const auto& key : keys) shield->record(key);
      out = std::move(shield);
      break;
    }
    case ShieldVariant::kParametric: {
      const auto actions = r.u64("action count");
      const auto threshold = r.f64("threshold");
      const std::size_t dim_offset = r.offset();
      const auto dim = r.u64("weight count");
      if (actions == 0 || dim != ParametricShield::kStateBits + actions) {
        throw ShieldFormatError("parametric weight count does not match action count", dim_offset);
      }
      if (!(threshold > 0.0 && threshold < 1.0)) throw ShieldFormatError("threshold outside (0, 1)", dim_offset - 8);
      std::vector<double> w(dim);
      for (auto& v : w) v = r.f64("weights");
      const double bias = r.f64("bias");
      auto shield = std::make_unique<ParametricShield>(actions, threshold);
      shield->set_parameters(w, bias);
      out = std::move(shield);
      break;
    }
    default:
      throw ShieldFormatError("unknown shield variant tag " + std::to_string(tag), tag_offset);
  }
  r.expect_end();
  return out;
}

inline void write_shield_file(const std::filesystem::path& path, const Shield& shield) {
  const auto bytes = serialize(shield);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::unique_ptr<Shield> read_shield_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize(bytes);
}

/// Set union of tabular shields. Any non-tabular input is rejected.
inline TabularShield merge_tabular(std::span<const Shield* const> shields) {
  TabularShield merged;
  for (const Shield* s : shields) {
    const auto* tab = dynamic_cast<const TabularShield*>(s);
    if (tab == nullptr) throw std::invalid_argument("shield merge requires tabular shields only");
    for (const auto& k : tab->entries()) merged.record(k);
  }
  return merged;
}

inline const char* variant_name(ShieldVariant v) {
  switch (v) {
    case ShieldVariant::kTabular: return "tabular";
    case ShieldVariant::kBloom: return "bloom";
    case ShieldVariant::kBounded: return "bounded";
    case ShieldVariant::kParametric: return "parametric";
  }
  return "unknown";
}

}  // namespace shieldbench
