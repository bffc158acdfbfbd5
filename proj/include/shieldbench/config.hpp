#pragma once

// Experiment configuration: flat `key = value` lines grouped under
// `[section]` headers. `#` starts a comment. See docs/config.md.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "shieldbench/layouts.hpp"
#include "shieldbench/ppo.hpp"

namespace shieldbench {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct ExperimentConfig {
  // [experiment]
  std::string protocol = "single";  // single | multi | goal
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t episodes = 500;
  std::uint64_t train_steps = 0;      // goal protocol: environment-step budget, 0 = use episodes
  std::string algorithm = "shieldppo";  // single/goal: ppo | shieldppo
  std::string shield_mode;            // multi: none | individual | shared
  std::size_t agent_count = 10;
  std::size_t workers = 0;            // multi: update threads, 0 = agent_count
  std::string shield_variant = "tabular";  // tabular | bounded | bloom
  std::size_t bounded_capacity = 1024;
  std::uint64_t bloom_expected = 10000;
  double bloom_fp = 0.01;

  // [env]
  std::string layout = "desk";
  std::string schedule = "tile";  // tile | flat | none
  double p0 = 0.01;
  double growth = 2.0;
  double cap = 0.5;
  double flat_p = 0.005;
  double shaping_sign = -1.0;
  std::size_t max_steps = 0;      // 0 = 4 * (width + height)
  std::size_t instance_pool = 0;  // > 0: episodes draw from a fixed pool of this many instance seeds

  // [agent]
  PpoConfig agent;

  // [eval]
  std::uint64_t eval_interval = 2000;  // goal protocol, in environment steps
  std::size_t eval_episodes = 50;      // per goal

  void validate() const;
  std::string to_text() const;
  bool uses_shield() const {
    return protocol == "multi" ? shield_mode != "none" : algorithm == "shieldppo";
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::uint64_t> parse_uint_list(const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of integers");
  return out;
}

struct ConfigField {
  std::string_view section;
  std::string_view key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
ConfigField uint_field(std::string_view section, std::string_view key, T ExperimentConfig::*m) {
  return {section, key, [m](ExperimentConfig& c, const std::string& v) { c.*m = static_cast<T>(parse_uint(v)); },
          [m](const ExperimentConfig& c) { return std::to_string(c.*m); }};
}

inline ConfigField double_field(std::string_view section, std::string_view key, double ExperimentConfig::*m) {
  return {section, key, [m](ExperimentConfig& c, const std::string& v) { c.*m = parse_double(v); },
          [m](const ExperimentConfig& c) { return format_double(c.*m); }};
}

inline ConfigField choice_field(std::string_view section, std::string_view key, std::string ExperimentConfig::*m,
                                std::initializer_list<std::string_view> allowed) {
  std::vector<std::string_view> options(allowed);
  return {section, key,
          [m, options](ExperimentConfig& c, const std::string& v) {
            for (auto o : options) {
              if (v == o) {
                c.*m = v;
                return;
              }
            }
            std::string msg = "expected one of";
            for (auto o : options) msg += " " + std::string(o);
            throw std::invalid_argument(msg + ", got '" + v + "'");
          },
          [m](const ExperimentConfig& c) { return c.*m; }};
}

template <class T>
ConfigField agent_uint(std::string_view key, T PpoConfig::*m) {
  return {"agent", key, [m](ExperimentConfig& c, const std::string& v) { c.agent.*m = static_cast<T>(parse_uint(v)); },
          [m](const ExperimentConfig& c) { return std::to_string(c.agent.*m); }};
}

inline ConfigField agent_double(std::string_view key, double PpoConfig::*m) {
  return {"agent", key, [m](ExperimentConfig& c, const std::string& v) { c.agent.*m = parse_double(v); },
          [m](const ExperimentConfig& c) { return format_double(c.agent.*m); }};
}

inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<ConfigField> kFields = {
      choice_field("experiment", "protocol", &C::protocol, {"single", "multi", "goal"}),
      {"experiment", "seeds", [](C& c, const std::string& v) { c.seeds = parse_uint_list(v); },
       [](const C& c) {
         std::string s;
         for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
         return s;
       }},
      uint_field("experiment", "episodes", &C::episodes),
      uint_field("experiment", "train_steps", &C::train_steps),
      choice_field("experiment", "algorithm", &C::algorithm, {"ppo", "shieldppo"}),
      choice_field("experiment", "shield_mode", &C::shield_mode, {"none", "individual", "shared"}),
      uint_field("experiment", "agent_count", &C::agent_count),
      uint_field("experiment", "workers", &C::workers),
      choice_field("experiment", "shield_variant", &C::shield_variant, {"tabular", "bounded", "bloom"}),
      uint_field("experiment", "bounded_capacity", &C::bounded_capacity),
      uint_field("experiment", "bloom_expected", &C::bloom_expected),
      double_field("experiment", "bloom_fp", &C::bloom_fp),
      {"env", "layout", [](C& c, const std::string& v) {
         named_layout(v);  // throws on unknown names
         c.layout = v;
       },
       [](const C& c) { return c.layout; }},
      choice_field("env", "schedule", &C::schedule, {"tile", "flat", "none"}),
      double_field("env", "p0", &C::p0),
      double_field("env", "growth", &C::growth),
      double_field("env", "cap", &C::cap),
      double_field("env", "flat_p", &C::flat_p),
      double_field("env", "shaping_sign", &C::shaping_sign),
      uint_field("env", "max_steps", &C::max_steps),
      uint_field("env", "instance_pool", &C::instance_pool),
      agent_double("gamma", &PpoConfig::gamma),
      agent_double("lambda", &PpoConfig::lambda),
      agent_double("clip", &PpoConfig::clip),
      agent_double("learning_rate", &PpoConfig::learning_rate),
      agent_uint("epochs", &PpoConfig::epochs),
      agent_uint("minibatch", &PpoConfig::minibatch),
      agent_double("entropy_coef", &PpoConfig::entropy_coef),
      agent_double("value_coef", &PpoConfig::value_coef),
      agent_uint("segment", &PpoConfig::segment),
      agent_uint("hidden", &PpoConfig::hidden),
      agent_double("max_grad_norm", &PpoConfig::max_grad_norm),
      uint_field("eval", "interval", &C::eval_interval),
      uint_field("eval", "episodes_per_goal", &C::eval_episodes),
  };
  return kFields;
}

/// Finds a field by `section.key`, or by bare key when `section` is empty
/// and the key is unique across sections.
inline const ConfigField* find_field(std::string_view section, std::string_view key) {
  const ConfigField* found = nullptr;
  for (const auto& f : config_fields()) {
    if (f.key != key) continue;
    if (!section.empty() && f.section != section) continue;
    if (found != nullptr) return nullptr;  // ambiguous bare key
    found = &f;
  }
  return found;
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (protocol == "multi") {
    if (shield_mode.empty()) throw ConfigError("protocol multi requires shield_mode");
    if (agent_count == 0) throw ConfigError("agent_count must be positive");
  } else if (!shield_mode.empty()) {
    throw ConfigError("shield_mode is only valid with protocol multi");
  }
  const auto layout_spec = named_layout(layout);
  if (protocol == "goal" && layout_spec.goals().size() != 3) {
    throw ConfigError("protocol goal needs a layout with three goals (e.g. goal3)");
  }
  if (schedule == "tile" && !layout_spec.lava_eligible().empty()) {
    try {
      tile_schedule(layout_spec, p0, growth, cap);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("invalid tile schedule: ") + e.what());
    }
  }
  if (schedule == "flat" && !(flat_p >= 0.0 && flat_p <= kMaxTileProbability)) {
    throw ConfigError("flat_p must lie in [0, 0.5]");
  }
  if (shaping_sign != 1.0 && shaping_sign != -1.0) throw ConfigError("shaping_sign must be 1 or -1");
  if (shield_variant == "bounded" && bounded_capacity == 0) throw ConfigError("bounded_capacity must be positive");
  if (shield_variant == "bloom" && (bloom_expected == 0 || !(bloom_fp > 0.0 && bloom_fp < 1.0))) {
    throw ConfigError("bloom_expected must be positive and bloom_fp in (0, 1)");
  }
  if (protocol == "goal" && (eval_interval == 0 || eval_episodes == 0)) {
    throw ConfigError("eval interval and episodes must be positive");
  }
  try {
    agent.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[agent] ") + e.what());
  }
}

/// Canonical text form; parse_config(to_text()) reproduces the config.
inline std::string ExperimentConfig::to_text() const {
  std::string out;
  std::string_view section;
  for (const auto& f : detail::config_fields()) {
    if (f.key == "shield_mode" && shield_mode.empty()) continue;
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + std::string(section) + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

/// Applies one `key=value` (or `section.key=value`) assignment.
inline void apply_override(ExperimentConfig& cfg, std::string_view assignment, std::size_t line = 0,
                           std::string_view section = {}) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key = value", line);
  std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  std::string sec(section);
  if (const auto dot = key.find('.'); dot != std::string::npos) {
    sec = key.substr(0, dot);
    key = key.substr(dot + 1);
  }
  const auto* field = detail::find_field(sec, key);
  if (field == nullptr) {
    throw ConfigError("unknown or ambiguous key '" + (sec.empty() ? key : sec + "." + key) + "'", line);
  }
  try {
    field->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(field->key) + ": " + e.what(), line);
  }
}

/// Parses config text. Errors carry the 1-based line number. The result is
/// not validated; call validate() after applying overrides.
inline ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", line_no);
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : detail::config_fields()) known = known || f.section == section;
      if (!known) throw ConfigError("unknown section [" + section + "]", line_no);
      continue;
    }
    if (section.empty()) throw ConfigError("key outside of a [section]", line_no);
    if (line.find('.') < line.find('=')) throw ConfigError("dotted keys are only valid in overrides", line_no);
    apply_override(cfg, line, line_no, section);
  }
  return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace shieldbench
