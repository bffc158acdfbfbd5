#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "shieldbench/config.hpp"
#include "shieldbench/harness.hpp"
#include "shieldbench/plot.hpp"
#include "shieldbench/report.hpp"
#include "shieldbench/shield_io.hpp"

namespace shieldbench {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Thrown for usage or configuration errors; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli {

inline constexpr const char* kSeedOffsetEnv = "SHIELDBENCH_SEED_OFFSET";

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;
};

inline std::uint64_t seed_offset() {
  const char* v = std::getenv(kSeedOffsetEnv);
  if (v == nullptr || *v == '\0') return 0;
  try {
    return detail::parse_uint(v);
  } catch (const std::invalid_argument&) {
    throw UsageError(std::string(kSeedOffsetEnv) + " must be a non-negative integer, got '" + v + "'");
  }
}

/// Loads, overrides and validates a config; every failure is a usage error.
inline ExperimentConfig load_validated(const std::string& path, const std::vector<std::string>& overrides) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError("cannot read config file " + path);
  ExperimentConfig cfg;
  try {
    cfg = load_config_file(path);
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

inline int run(Context& ctx, const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& out_dir) {
  auto cfg = load_validated(config_path, overrides);
  const std::uint64_t offset = seed_offset();
  for (auto& s : cfg.seeds) s += offset;

  std::vector<RunArtifact> runs;
  for (const auto seed : cfg.seeds) {
    ProgressFn progress;
    if (!ctx.quiet) progress = [&](const std::string& msg) { ctx.err << msg << '\n'; };
    runs.push_back(run_experiment(cfg, seed, progress));
    const auto dir = write_artifact(out_dir, runs.back());
    if (!ctx.quiet) ctx.err << "wrote " << dir.string() << '\n';
  }
  const auto table = aggregate(runs);
  detail::write_text_file(std::filesystem::path(out_dir) / "aggregate.csv", aggregate_csv(table));
  detail::write_text_file(std::filesystem::path(out_dir) / "summary.json", summary_json(runs, table));
  if (table.degenerate && !ctx.quiet) ctx.err << "warning: one run only, standard errors are reported as 0\n";
  if (!ctx.quiet) ctx.out << summary_table(runs);
  return kExitOk;
}

inline int validate(Context& ctx, const std::string& config_path, const std::vector<std::string>& overrides) {
  const auto cfg = load_validated(config_path, overrides);
  if (!ctx.quiet) ctx.out << config_path << ": ok (protocol " << cfg.protocol << ", " << cfg.seeds.size() << " seeds)\n";
  return kExitOk;
}

inline int shield_inspect(Context& ctx, const std::string& path, bool list_keys) {
  const auto shield = read_shield_file(path);
  ctx.out << "variant: " << variant_name(shield->variant()) << '\n';
  ctx.out << "size: " << shield->size() << '\n';
  if (list_keys) {
    std::vector<ShieldKey> keys;
    if (const auto* t = dynamic_cast<const TabularShield*>(shield.get())) keys = t->entries();
    if (const auto* b = dynamic_cast<const BoundedShield*>(shield.get())) keys = b->entries_by_recency();
    for (const auto& k : keys) ctx.out << k.hex() << '\n';
  }
  return kExitOk;
}

inline int shield_merge(Context& ctx, const std::vector<std::string>& inputs, const std::string& out_path) {
  if (inputs.size() < 2) throw UsageError("shield-merge needs at least two input files");
  std::vector<std::unique_ptr<Shield>> shields;
  for (const auto& p : inputs) shields.push_back(read_shield_file(p));
  std::vector<const Shield*> ptrs;
  for (const auto& s : shields) ptrs.push_back(s.get());
  const auto merged = merge_tabular(ptrs);
  write_shield_file(out_path, merged);
  if (!ctx.quiet) ctx.out << "merged " << inputs.size() << " shields, " << merged.size() << " entries -> " << out_path << '\n';
  return kExitOk;
}

inline int plot(Context& ctx, const std::vector<std::string>& inputs, std::vector<std::string> labels,
                const std::string& out_path, const std::string& title) {
  if (!labels.empty() && labels.size() != inputs.size()) throw UsageError("--label must be given once per input CSV");
  std::vector<PlotSeries> series;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::ifstream in(inputs[i]);
    if (!in) throw std::runtime_error("cannot read " + inputs[i]);
    PlotSeries s;
    s.label = labels.empty() ? std::filesystem::path(inputs[i]).parent_path().filename().string() : labels[i];
    if (s.label.empty()) s.label = inputs[i];
    s.table = parse_aggregate_csv(in);
    if (s.table.rows.empty()) throw std::runtime_error(inputs[i] + ": CSV has no data rows");
    series.push_back(std::move(s));
  }
  PlotOptions opt;
  opt.title = title;
  const auto svg = render_svg(series, opt);
  detail::write_text_file(out_path, svg);
  if (!ctx.quiet) ctx.out << "wrote " << out_path << '\n';
  return kExitOk;
}

}  // namespace cli

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shielded PPO experiments on LavaGrid", "shieldbench"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet,-q", quiet, "Suppress progress and summary output");

  std::string config_path, out_dir = "results";
  std::vector<std::string> overrides;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--set", overrides, "Override, KEY=VALUE (repeatable)")->take_all();
  run->add_option("--out", out_dir, "Output directory");
  run->add_flag("--quiet,-q", quiet, "Suppress progress and summary output");

  auto* validate = app.add_subcommand("validate", "Check a config file without running it");
  validate->add_option("--config", config_path, "Config file")->required();
  validate->add_option("--set", overrides, "Override, KEY=VALUE (repeatable)")->take_all();
  validate->add_flag("--quiet,-q", quiet, "Print nothing on success");

  std::string shield_path;
  bool list_keys = false;
  auto* inspect = app.add_subcommand("shield-inspect", "Print a shield file's variant, size and keys");
  inspect->add_option("shield", shield_path, "Shield file")->required();
  inspect->add_flag("--keys", list_keys, "List every stored key");

  std::vector<std::string> inputs;
  std::string out_file;
  auto* merge = app.add_subcommand("shield-merge", "Union of tabular shield files");
  merge->add_option("inputs", inputs, "Shield files")->required();
  merge->add_option("--out", out_file, "Merged shield file")->required();
  merge->add_flag("--quiet,-q", quiet, "Print nothing on success");

  std::vector<std::string> labels;
  std::string title;
  auto* plot = app.add_subcommand("plot", "Render aggregate CSVs as a two-panel SVG");
  plot->add_option("inputs", inputs, "aggregate.csv files, one series each")->required();
  plot->add_option("--out", out_file, "SVG file")->required();
  plot->add_option("--label", labels, "Series label (once per input)")->take_all();
  plot->add_option("--title", title, "Figure title");
  plot->add_flag("--quiet,-q", quiet, "Print nothing on success");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  // Overrides may contain '=', which CLI11 accepts verbatim.
  for (auto& o : overrides) {
    if (o.find('=') == std::string::npos) {
      err << "error: --set expects KEY=VALUE, got '" << o << "'\n";
      return kExitUsage;
    }
  }

  cli::Context ctx{out, err, quiet};
  try {
    if (run->parsed()) return cli::run(ctx, config_path, overrides, out_dir);
    if (validate->parsed()) return cli::validate(ctx, config_path, overrides);
    if (inspect->parsed()) return cli::shield_inspect(ctx, shield_path, list_keys);
    if (merge->parsed()) return cli::shield_merge(ctx, inputs, out_file);
    if (plot->parsed()) return cli::plot(ctx, inputs, labels, out_file, title);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace shieldbench
