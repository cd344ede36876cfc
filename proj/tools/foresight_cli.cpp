// foresight: mask/bench utilities, sampler inspection, ablation runs and the
// acceptance suite.
//
// Exit codes: 0 ok, 2 config error, 3 runtime failure, 4 acceptance failure.
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "foresight/acceptance.hpp"
#include "foresight/attention.hpp"
#include "foresight/chunk_layout.hpp"
#include "foresight/errors.hpp"
#include "foresight/experiment.hpp"
#include "foresight/metrics.hpp"
#include "foresight/sparse_mask.hpp"
#include "foresight/synth_world.hpp"
#include "foresight/temporal_sampler.hpp"

namespace fs = std::filesystem;
using namespace foresight;

namespace {

// Config file: {"layout": ..., "mask": ..., "plan": ...}; every section
// optional, unknown keys rejected at every level.
struct RunConfig {
  LayoutConfig layout{};
  MaskConfig mask{};
  std::optional<nlohmann::json> plan;
};

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) {
    return cfg;
  }
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) {
    throw ConfigError("config " + path + ": top level must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "layout") {
      from_json(value, cfg.layout);
    } else if (key == "mask") {
      from_json(value, cfg.mask);
    } else if (key == "plan") {
      cfg.plan = value;
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

// FORESIGHT_THREADS caps every worker count.
int thread_cap(int requested) {
  if (const char* env = std::getenv("FORESIGHT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) {
      throw ConfigError("FORESIGHT_THREADS must be a positive integer");
    }
    return std::max(1, std::min(requested, static_cast<int>(cap)));
  }
  return std::max(1, requested);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw RuntimeFailure("cannot write " + path.string());
  }
  return out;
}

// --------------------------------------------------------------------------

struct LayoutArgs {
  std::optional<int> n_chunks;
  std::optional<int> block_size;
  fs::path out_dir = "layout_out";
};

int cmd_layout(const RunConfig& cfg, const LayoutArgs& a) {
  LayoutConfig lc = cfg.layout;
  if (a.block_size) {
    lc.block_size = *a.block_size;
  }
  lc.validate();
  cfg.mask.validate();
  const int n_chunks = a.n_chunks.value_or(4);
  const auto layout = build_prompt_layout(lc, n_chunks);
  const auto grid = block_partition(layout, lc.block_size);
  fs::create_directories(a.out_dir);

  nlohmann::json j;
  j["layout"] = layout_to_json(layout);
  j["mask"] = cfg.mask;
  j["grid"] = {{"n_blocks", grid.n_blocks()},
               {"block_size", grid.block_size},
               {"system_blocks", grid.system_blocks},
               {"blocks_per_chunk", grid.blocks_per_chunk},
               {"padded_len", grid.padded_len()}};
  nlohmann::json groups = nlohmann::json::array();
  for (int g = 0; g < cfg.mask.parity_groups; ++g) {
    const auto mask = build_mask(grid, cfg.mask, g);
    const auto name = "mask_group" + std::to_string(g) + ".pgm";
    auto out = open_out(a.out_dir / name);
    write_pgm(out, mask);
    groups.push_back({{"group", g}, {"active_pairs", mask.active_pairs()}, {"pgm", name}});
  }
  j["groups"] = groups;
  auto out = open_out(a.out_dir / "layout.json");
  out << j.dump(2) << '\n';
  std::cout << "n_chunks " << n_chunks << ": " << grid.n_blocks() << " blocks; wrote " << (a.out_dir / "layout.json")
            << " and " << groups.size() << " PGM files\n";
  return 0;
}

struct BenchArgs {
  std::vector<int> chunks{4, 8, 16, 32};
  std::optional<int> block_size;
  int head_dim = 64;
  int repeats = 5;
  int workers = 1;
  bool counts_only = false;
  std::string out;
};

int cmd_bench(const RunConfig& cfg, const BenchArgs& a) {
  BenchmarkSpec spec;
  spec.n_chunks = a.chunks;
  spec.layout = cfg.layout;
  if (a.block_size) {
    spec.layout.block_size = *a.block_size;
  }
  spec.layout.validate();
  spec.mask = cfg.mask;
  spec.head_dim = a.head_dim;
  spec.repeats = a.repeats;
  spec.workers = thread_cap(a.workers);
  spec.counts_only = a.counts_only;
  if (a.repeats < 3 && !a.counts_only) {
    std::cerr << "warning: --repeats " << a.repeats << " < 3; the reported medians are not robust\n";
  }
  const auto rows = benchmark(spec);
  if (a.out.empty()) {
    write_benchmark_csv(std::cout, rows);
  } else {
    auto out = open_out(a.out);
    write_benchmark_csv(out, rows);
  }
  const auto& last = rows.back();
  std::cerr << "n_chunks " << last.n_chunks << ": " << last.active_pairs << "/" << last.dense_pairs
            << " active block pairs";
  if (!a.counts_only) {
    std::cerr << ", speedup " << last.speedup() << "x";
  }
  std::cerr << '\n';
  return 0;
}

struct SamplerArgs {
  std::uint64_t episode_seed = 1;
  std::optional<double> tau;
  int draws = 4;
  std::string out;
};

int cmd_sampler_stats(const ExperimentPlan& plan, const SamplerArgs& a) {
  ImportanceConfig sc = plan.sampler;
  if (a.tau) {
    sc.tau = *a.tau;
  }
  sc.validate();
  WorldConfig wc = plan.world;
  wc.event_script = random_event_script(a.episode_seed, wc.episode_len_s, wc.control_hz);
  const auto ep = generate_episode(a.episode_seed, wc);
  const auto scored = score_trajectory(ep.a_x, ep.a_y, sc);
  if (a.out.empty()) {
    write_sampler_csv(std::cout, scored);
  } else {
    auto out = open_out(a.out);
    write_sampler_csv(out, scored);
  }
  double sum_sq = 0.0;
  double entropy = 0.0;
  double event_mass = 0.0;
  for (std::size_t k = 0; k < scored.p.size(); ++k) {
    const double p = scored.p[k];
    sum_sq += p * p;
    entropy -= p > 0.0 ? p * std::log(p) : 0.0;
    event_mass += step_in_event(ep, static_cast<int>(k)) ? p : 0.0;
  }
  int event_steps = 0;
  for (int k = 0; k < ep.n_steps; ++k) {
    event_steps += step_in_event(ep, k) ? 1 : 0;
  }
  Rng rng(a.episode_seed);
  const auto steps = sample_steps(scored.p, a.draws, sc.max_gap, rng);
  std::cerr << "steps " << ep.n_steps << ", tau " << sc.tau << ", entropy " << entropy << " nats, ESS "
            << 1.0 / sum_sq << ", event mass " << event_mass << " over "
            << static_cast<double>(event_steps) / ep.n_steps << " of steps, draw";
  for (int s : steps) {
    std::cerr << ' ' << s;
  }
  std::cerr << '\n';
  return 0;
}

struct RunArgs {
  std::optional<std::string> plan;
  std::optional<int> seeds;
  std::optional<int> workers;
  fs::path out_dir = "runs/latest";
  bool force = false;
};

ExperimentPlan resolve_plan(const RunConfig& cfg, const std::optional<std::string>& preset) {
  std::string name = preset.value_or("full");
  if (!preset && cfg.plan && cfg.plan->contains("plan_id")) {
    name = cfg.plan->at("plan_id").get<std::string>();
  }
  ExperimentPlan plan = preset_plan(name);
  if (cfg.plan) {
    from_json(*cfg.plan, plan);
  }
  if (preset) {
    const auto p = preset_plan(*preset);
    plan.plan_id = p.plan_id;
    plan.arms = p.arms;
  }
  return plan;
}

int cmd_run(const RunConfig& cfg, const RunArgs& a) {
  ExperimentPlan plan = resolve_plan(cfg, a.plan);
  if (a.seeds) {
    if (*a.seeds < 1) {
      throw ConfigError("--seeds must be >= 1");
    }
    plan.seeds.clear();
    for (int s = 1; s <= *a.seeds; ++s) {
      plan.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  plan.workers = thread_cap(a.workers.value_or(plan.workers));
  plan.validate();
  if (fs::exists(a.out_dir / "plan.json") && !a.force) {
    std::ifstream in(a.out_dir / "plan.json");
    const auto old = nlohmann::json::parse(in, nullptr, false);
    const bool same = !old.is_discarded() && old.value("fingerprint", "") == plan_fingerprint(plan);
    throw ConfigError(a.out_dir.string() + " already holds " + (same ? "this run" : "a different run") +
                      "; pass --force to overwrite");
  }
  const auto result = run_ablation(plan, a.out_dir, [](const std::string& msg) { std::cerr << msg << '\n'; });
  bool sane = true;
  for (const auto& arm : result.arms) {
    for (double v : metric_values(arm.median)) {
      if (!std::isfinite(v)) {
        std::cerr << "arm " << to_string(arm.arm) << ": non-finite metric\n";
        sane = false;
      }
    }
  }
  std::cout << "fingerprint " << result.fingerprint << "\narm";
  for (const auto& c : kMetricColumns) {
    std::cout << ' ' << c;
  }
  std::cout << '\n';
  for (const auto& arm : result.arms) {
    std::cout << to_string(arm.arm);
    for (double v : metric_values(arm.median)) {
      std::cout << ' ' << v;
    }
    std::cout << '\n';
  }
  return sane ? 0 : 3;
}

struct CompareArgs {
  std::vector<std::string> runs;
  std::string reference;
  std::string out;
};

int cmd_compare(const CompareArgs& a) {
  std::vector<fs::path> dirs(a.runs.begin(), a.runs.end());
  const auto rows = compare_runs(dirs, a.reference.empty() ? a.runs.front() : a.reference);
  if (a.out.empty()) {
    write_comparison_csv(std::cout, rows);
  } else {
    auto out = open_out(a.out);
    write_comparison_csv(out, rows);
  }
  return 0;
}

struct CheckArgs {
  std::vector<int> only;
  fs::path work_dir;
  std::optional<int> workers;
};

int cmd_check(const RunConfig& cfg, const CheckArgs& a) {
  AcceptanceOptions opts;
  if (!a.only.empty()) {
    opts.criteria = {a.only.begin(), a.only.end()};
  }
  opts.work_dir = a.work_dir;
  opts.plan = resolve_plan(cfg, std::nullopt);
  opts.plan.workers = thread_cap(a.workers.value_or(opts.plan.workers));
  opts.plan.validate();
  const auto results = run_acceptance(opts, std::cout);
  return acceptance_exit_code(results);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"foresight: chunked world-model toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON config with optional 'layout', 'mask' and 'plan' sections")
      ->check(CLI::ExistingFile);

  LayoutArgs layout_args;
  auto* layout = app.add_subcommand("layout", "Dump the prompt layout as JSON and the block mask of each head group as PGM");
  layout->add_option("--n-chunks", layout_args.n_chunks, "Chunks in the prompt (default 4)")->check(CLI::PositiveNumber);
  layout->add_option("--block-size", layout_args.block_size, "Tokens per block")->check(CLI::PositiveNumber);
  layout->add_option("-o,--out", layout_args.out_dir, "Output directory");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Sparse vs dense attention benchmark (CSV)");
  bench->add_option("--chunks", bench_args.chunks, "Chunk counts")->delimiter(',')->check(CLI::PositiveNumber);
  bench->add_option("--block-size", bench_args.block_size, "Tokens per block")->check(CLI::PositiveNumber);
  bench->add_option("--head-dim", bench_args.head_dim, "Head dimension")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", bench_args.repeats, "Timing repeats; the median is reported")
      ->check(CLI::PositiveNumber);
  bench->add_option("--workers", bench_args.workers, "Sparse executor threads")->check(CLI::PositiveNumber);
  bench->add_flag("--counts-only", bench_args.counts_only, "Report block counts without timing");
  bench->add_option("-o,--out", bench_args.out, "CSV path (default stdout)");

  SamplerArgs sampler_args;
  auto* sampler = app.add_subcommand("sampler", "Temporal importance sampler tools");
  sampler->require_subcommand(1);
  auto* stats = sampler->add_subcommand("stats", "Score a synthetic episode; CSV of a_x,a_y,w,p plus a summary");
  stats->add_option("--episode-seed", sampler_args.episode_seed, "Synthetic episode seed");
  stats->add_option("--tau", sampler_args.tau, "Sampling temperature");
  stats->add_option("--draws", sampler_args.draws, "Steps in the example constrained draw")
      ->check(CLI::PositiveNumber);
  stats->add_option("-o,--out", sampler_args.out, "CSV path (default stdout)");

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Train and evaluate an ablation plan");
  run->add_option("--plan", run_args.plan, "Preset: full | framewise_vs_chunk");
  run->add_option("--seeds", run_args.seeds, "Number of seeds (1..N)");
  run->add_option("--workers", run_args.workers, "Parallel seed jobs (capped by FORESIGHT_THREADS)")
      ->check(CLI::PositiveNumber);
  run->add_option("-o,--out", run_args.out_dir, "Results directory");
  run->add_flag("--force", run_args.force, "Overwrite an existing results directory");

  CompareArgs compare_args;
  auto* compare = app.add_subcommand("compare", "Metric ratios of result tables against a reference");
  compare->add_option("runs", compare_args.runs, "Run directories")->required();
  compare->add_option("--reference", compare_args.reference,
                      "Reference run directory or arm name (default: the first run)");
  compare->add_option("-o,--out", compare_args.out, "CSV path (default stdout)");

  CheckArgs check_args;
  auto* check = app.add_subcommand("check", "Run the acceptance suite");
  check->add_option("--only", check_args.only, "Criteria to run")->check(CLI::Range(1, 9));
  check->add_option("--work-dir", check_args.work_dir, "Scratch directory");
  check->add_option("--workers", check_args.workers, "Parallel seed jobs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = load_config(config_path);
    if (*layout) {
      return cmd_layout(cfg, layout_args);
    }
    if (*bench) {
      return cmd_bench(cfg, bench_args);
    }
    if (*stats) {
      return cmd_sampler_stats(resolve_plan(cfg, std::nullopt), sampler_args);
    }
    if (*run) {
      return cmd_run(cfg, run_args);
    }
    if (*compare) {
      return cmd_compare(compare_args);
    }
    if (*check) {
      return cmd_check(cfg, check_args);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
