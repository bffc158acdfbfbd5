#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shieldbench/config.hpp"
#include "shieldbench/harness.hpp"

namespace shieldbench {

inline constexpr std::string_view kMetricsHeader =
    "run_seed,episode,mean_return,mistake_count,step_count,mistake_rate,repeated_mistake_count,success_rate";
inline constexpr std::string_view kEpisodesHeader = "agent,episode,return,steps,mistakes,repeated,success,cluster_id,goal";
inline constexpr std::string_view kEvalHeader = "run_seed,env_steps,goal,success_rate";
inline constexpr std::string_view kAggregateHeader =
    "episode,n,mean_return,se_return,mean_mistake_rate,se_mistake_rate,mean_success_rate,se_success_rate";

/// Signed logarithm used for the return axis: sign(x) * log10(1 + |x|).
inline double symlog(double x) { return std::copysign(std::log10(1.0 + std::fabs(x)), x); }

inline std::string fmt17(double v) { return detail::format_double(v); }

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(std::istream& in, std::string_view header) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw std::runtime_error("unexpected CSV header '" + line + "'");
  const std::size_t cols = split_csv_line(line).size();
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (fields.size() != cols) throw std::runtime_error("CSV line " + std::to_string(n) + ": wrong field count");
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string json_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out;
}

inline std::string json_number(double v) { return std::isfinite(v) ? format_double(v) : "null"; }

}  // namespace detail

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.run_seed) + ',' + std::to_string(r.episode) + ',' + fmt17(r.mean_return) + ',' +
           std::to_string(r.mistake_count) + ',' + std::to_string(r.step_count) + ',' + fmt17(r.mistake_rate) + ',' +
           std::to_string(r.repeated_mistake_count) + ',' + fmt17(r.success_rate) + '\n';
  }
  return out;
}

inline std::vector<MetricsRow> parse_metrics_csv(std::istream& in) {
  std::vector<MetricsRow> rows;
  for (const auto& f : detail::read_csv(in, kMetricsHeader)) {
    MetricsRow r;
    r.run_seed = detail::parse_uint(f[0]);
    r.episode = detail::parse_uint(f[1]);
    r.mean_return = detail::parse_double(f[2]);
    r.mistake_count = detail::parse_uint(f[3]);
    r.step_count = detail::parse_uint(f[4]);
    r.mistake_rate = detail::parse_double(f[5]);
    r.repeated_mistake_count = detail::parse_uint(f[6]);
    r.success_rate = detail::parse_double(f[7]);
    rows.push_back(r);
  }
  return rows;
}

inline std::string episodes_csv(const std::vector<EpisodeRecord>& rows) {
  std::string out(kEpisodesHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.agent) + ',' + std::to_string(r.episode) + ',' + fmt17(r.ret) + ',' +
           std::to_string(r.steps) + ',' + std::to_string(r.mistakes) + ',' + std::to_string(r.repeated) + ',' +
           (r.success ? "1" : "0") + ',' + std::to_string(r.cluster_id) + ',' + std::to_string(r.goal) + '\n';
  }
  return out;
}

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::string out(kEvalHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.run_seed) + ',' + std::to_string(r.env_steps) + ',' + std::to_string(r.goal) + ',' +
           fmt17(r.success_rate) + '\n';
  }
  return out;
}

inline std::string mistakes_csv(const std::vector<std::vector<MistakeRecord>>& per_agent) {
  std::ostringstream out;
  if (per_agent.size() == 1) {
    write_mistake_log(out, per_agent.front());
    return out.str();
  }
  out << "agent,episode,step,key\n";
  for (std::size_t a = 0; a < per_agent.size(); ++a) {
    for (const auto& m : per_agent[a]) out << a << ',' << m.episode << ',' << m.step << ',' << m.key.hex() << '\n';
  }
  return out.str();
}

/// Directory name of one seed's artifact under the output root.
inline std::string artifact_dir_name(const RunArtifact& art) {
  return art.protocol + "_seed" + std::to_string(art.run_seed);
}

/// Writes metrics.csv, episodes.csv, mistakes.csv, config.cfg, the shield
/// file(s) and, for the goal protocol, eval.csv.
inline std::filesystem::path write_artifact(const std::filesystem::path& root, const RunArtifact& art) {
  const auto dir = root / artifact_dir_name(art);
  std::filesystem::create_directories(dir);
  detail::write_text_file(dir / "metrics.csv", metrics_csv(art.metrics));
  detail::write_text_file(dir / "episodes.csv", episodes_csv(art.episodes));
  detail::write_text_file(dir / "mistakes.csv", mistakes_csv(art.mistakes));
  detail::write_text_file(dir / "config.cfg", art.config_text);
  if (art.protocol == "goal") detail::write_text_file(dir / "eval.csv", eval_csv(art.eval));
  for (std::size_t i = 0; i < art.shields.size(); ++i) {
    const std::string name = art.shields.size() == 1 ? "shield.shld" : "shield_agent" + std::to_string(i) + ".shld";
    const auto& bytes = art.shields[i];
    detail::write_text_file(dir / name, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  return dir;
}

struct AggregateRow {
  std::uint64_t episode = 0;
  std::size_t n = 0;
  double mean_return = 0.0;
  double se_return = 0.0;
  double mean_mistake_rate = 0.0;
  double se_mistake_rate = 0.0;
  double mean_success_rate = 0.0;
  double se_success_rate = 0.0;
};

struct AggregateTable {
  std::vector<AggregateRow> rows;
  std::size_t runs = 0;
  bool degenerate = false;  // a single run: standard errors are reported as 0
};

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

/// Mean and standard error (sample sd / sqrt(n)). The values are summed in
/// sorted order so the result does not depend on input order.
inline MeanSe mean_se(std::vector<double> v) {
  if (v.empty()) return {};
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / n;
  if (v.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / (n - 1.0)) / std::sqrt(n)};
}

/// Config text with the seeds line removed, for comparing runs.
inline std::string config_modulo_seeds(std::string_view text) {
  std::string out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).rfind("seeds", 0) == 0) continue;
    out += line + '\n';
  }
  return out;
}

/// Per-episode mean and standard error across runs. Only episodes present
/// in every run are aggregated.
inline AggregateTable aggregate(const std::vector<const RunArtifact*>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate needs at least one artifact");
  const auto reference = config_modulo_seeds(runs.front()->config_text);
  std::size_t episodes = runs.front()->metrics.size();
  for (const auto* r : runs) {
    if (config_modulo_seeds(r->config_text) != reference) {
      throw std::invalid_argument("aggregate: artifacts were produced by different configs");
    }
    episodes = std::min(episodes, r->metrics.size());
  }
  AggregateTable out;
  out.runs = runs.size();
  out.degenerate = runs.size() == 1;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::vector<double> ret, rate, success;
    for (const auto* r : runs) {
      ret.push_back(r->metrics[e].mean_return);
      rate.push_back(r->metrics[e].mistake_rate);
      success.push_back(r->metrics[e].success_rate);
    }
    const auto a = mean_se(ret), b = mean_se(rate), c = mean_se(success);
    out.rows.push_back({e, runs.size(), a.mean, a.se, b.mean, b.se, c.mean, c.se});
  }
  return out;
}

inline AggregateTable aggregate(const std::vector<RunArtifact>& runs) {
  std::vector<const RunArtifact*> ptrs;
  for (const auto& r : runs) ptrs.push_back(&r);
  return aggregate(ptrs);
}

inline std::string aggregate_csv(const AggregateTable& table) {
  std::string out(kAggregateHeader);
  out += '\n';
  for (const auto& r : table.rows) {
    out += std::to_string(r.episode) + ',' + std::to_string(r.n) + ',' + fmt17(r.mean_return) + ',' +
           fmt17(r.se_return) + ',' + fmt17(r.mean_mistake_rate) + ',' + fmt17(r.se_mistake_rate) + ',' +
           fmt17(r.mean_success_rate) + ',' + fmt17(r.se_success_rate) + '\n';
  }
  return out;
}

inline AggregateTable parse_aggregate_csv(std::istream& in) {
  AggregateTable t;
  for (const auto& f : detail::read_csv(in, kAggregateHeader)) {
    AggregateRow r;
    r.episode = detail::parse_uint(f[0]);
    r.n = detail::parse_uint(f[1]);
    r.mean_return = detail::parse_double(f[2]);
    r.se_return = detail::parse_double(f[3]);
    r.mean_mistake_rate = detail::parse_double(f[4]);
    r.se_mistake_rate = detail::parse_double(f[5]);
    r.mean_success_rate = detail::parse_double(f[6]);
    r.se_success_rate = detail::parse_double(f[7]);
    t.rows.push_back(r);
  }
  if (!t.rows.empty()) t.runs = t.rows.front().n;
  t.degenerate = t.runs == 1;
  return t;
}

/// Config snapshot plus run totals and overall aggregate statistics.
inline std::string summary_json(const std::vector<RunArtifact>& runs, const AggregateTable& table) {
  std::string out = "{\n";
  out += "  \"config\": \"" + detail::json_escape(runs.empty() ? "" : runs.front().config_text) + "\",\n";
  out += "  \"degenerate_sample\": " + std::string(table.degenerate ? "true" : "false") + ",\n";
  out += "  \"runs\": [\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    double final_return = 0.0;
    if (!r.metrics.empty()) final_return = r.metrics.back().mean_return;
    out += "    {\"run_seed\": " + std::to_string(r.run_seed) + ", \"episodes\": " + std::to_string(r.metrics.size()) +
           ", \"total_steps\": " + std::to_string(r.total_steps) +
           ", \"total_mistakes\": " + std::to_string(r.total_mistakes()) +
           ", \"repeated_mistakes\": " + std::to_string(r.total_repeated()) +
           ", \"final_mistake_rate\": " + detail::json_number(r.metrics.empty() ? 0.0 : r.metrics.back().mistake_rate) +
           ", \"final_return\": " + detail::json_number(final_return) + "}";
    out += i + 1 < runs.size() ? ",\n" : "\n";
  }
  out += "  ],\n";
  std::vector<double> totals, repeated;
  for (const auto& r : runs) {
    totals.push_back(static_cast<double>(r.total_mistakes()));
    repeated.push_back(static_cast<double>(r.total_repeated()));
  }
  const auto m = mean_se(totals);
  const auto q = mean_se(repeated);
  out += "  \"aggregate\": {\"episodes\": " + std::to_string(table.rows.size()) +
         ", \"mean_total_mistakes\": " + detail::json_number(m.mean) +
         ", \"se_total_mistakes\": " + detail::json_number(m.se) +
         ", \"mean_repeated_mistakes\": " + detail::json_number(q.mean) +
         ", \"se_repeated_mistakes\": " + detail::json_number(q.se);
  if (!table.rows.empty()) {
    const auto& last = table.rows.back();
    out += ", \"final_mean_return\": " + detail::json_number(last.mean_return) +
           ", \"final_se_return\": " + detail::json_number(last.se_return) +
           ", \"final_mean_mistake_rate\": " + detail::json_number(last.mean_mistake_rate) +
           ", \"final_se_mistake_rate\": " + detail::json_number(last.se_mistake_rate);
  }
  out += "}\n}\n";
  return out;
}

/// Human-readable one-line-per-seed table.
inline std::string summary_table(const std::vector<RunArtifact>& runs) {
  std::string out = "seed      episodes  steps       mistakes  repeated  final_rate\n";
  char buf[160];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%-9llu %-9zu %-11llu %-9llu %-9llu %.6g\n",
                  static_cast<unsigned long long>(r.run_seed), r.metrics.size(),
                  static_cast<unsigned long long>(r.total_steps), static_cast<unsigned long long>(r.total_mistakes()),
                  static_cast<unsigned long long>(r.total_repeated()),
                  r.metrics.empty() ? 0.0 : r.metrics.back().mistake_rate);
    out += buf;
  }
  return out;
}

struct MannKendall {
  double s = 0.0;
  double variance = 0.0;
  double z = 0.0;
};

/// Mann-Kendall trend statistic with the tie-corrected variance.
inline MannKendall mann_kendall(const std::vector<double>& x) {
  MannKendall out;
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) out.s += (x[j] > x[i]) - (x[j] < x[i]);
  }
  auto sorted = x;
  std::sort(sorted.begin(), sorted.end());
  double ties = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * (t - 1.0) * (2.0 * t + 5.0);
    i = j;
  }
  const double nn = static_cast<double>(n);
  out.variance = (nn * (nn - 1.0) * (2.0 * nn + 5.0) - ties) / 18.0;
  if (out.variance > 0.0) {
    if (out.s > 0) out.z = (out.s - 1.0) / std::sqrt(out.variance);
    if (out.s < 0) out.z = (out.s + 1.0) / std::sqrt(out.variance);
  }
  return out;
}

}  // namespace shieldbench
