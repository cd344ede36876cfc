#include "foresight/acceptance.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <Eigen/Dense>

#include "foresight/attention.hpp"
#include "foresight/chunk_layout.hpp"
#include "foresight/metrics.hpp"
#include "foresight/model.hpp"
#include "foresight/objectives.hpp"
#include "foresight/rng.hpp"
#include "foresight/sparse_mask.hpp"
#include "foresight/temporal_sampler.hpp"

namespace foresight {

namespace {

CriterionResult started(int id, const char* title) {
  CriterionResult r;
  r.id = id;
  r.title = title;
  return r;
}

double cpu_now() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// Brute-force score, written independently of importance_scores.
std::vector<double> brute_force_scores(const std::vector<double>& ax, const std::vector<double>& ay,
                                       const ImportanceConfig& cfg) {
  const int T = static_cast<int>(ax.size());
  std::vector<double> w(ax.size(), 0.0);
  for (int k = 0; k < T; ++k) {
    double total = 0.0;
    for (const auto& win : cfg.windows) {
      double best = 0.0;
      bool any = false;
      for (int t = 0; t < T; ++t) {
        if (t < k + win.begin || t >= k + win.end) {
          continue;
        }
        const double v = cfg.lambda_x * std::fabs(ax[static_cast<std::size_t>(t)]) +
                         cfg.lambda_y * std::fabs(ay[static_cast<std::size_t>(t)]);
        best = any ? std::max(best, v) : v;
        any = true;
      }
      total += best;
    }
    w[static_cast<std::size_t>(k)] = total + cfg.epsilon_floor;
  }
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------

CriterionResult check_oracle_equivalence() {
  auto r = started(1, "sparse/dense oracle equivalence");
  r.cpu_limit_seconds = 60.0;
  const double t0 = cpu_now();
  Rng rng(20240601);
  double worst = 0.0;
  int instances = 0;
  int max_tokens = 0;
  while (instances < 50) {
    LayoutConfig lc;
    lc.system_prompt_len = 1 + static_cast<int>(rng.below(8));
    lc.text_len_per_chunk = 1 + static_cast<int>(rng.below(4));
    lc.obs_frames_per_chunk = 1 + static_cast<int>(rng.below(3));
    lc.tokens_per_frame_per_view = 1 + static_cast<int>(rng.below(2));
    lc.n_views = 1 + static_cast<int>(rng.below(3));
    lc.action_len_per_chunk = 1 + static_cast<int>(rng.below(4));
    lc.query_len_per_chunk = 1 + static_cast<int>(rng.below(4));
    const int block_sizes[] = {2, 4, 8, 16};
    lc.block_size = block_sizes[rng.below(4)];
    const int n_chunks = 1 + static_cast<int>(rng.below(8));
    const auto grid = block_partition(build_prompt_layout(lc, n_chunks), lc.block_size);
    if (grid.padded_len() > 512) {
      continue;
    }
    MaskConfig mc;
    mc.neighborhood_base_radius = static_cast<int>(rng.below(3));
    mc.neighborhood_shrink = rng.below(2) == 0 ? ShrinkRule::Halving : ShrinkRule::Constant;
    mc.query_exempt_from_parity = rng.below(2) == 0;
    const int group = static_cast<int>(rng.below(2));
    const int d = 1 + static_cast<int>(rng.below(64));
    const auto mask = build_mask(grid, mc, group);
    const auto in = random_attention_inputs(grid, d, rng.next_u64(), 1.0 + 2.0 * rng.uniform());
    const auto sparse = block_sparse_attention(in.q, in.k, in.v, mask, grid);
    const auto dense = dense_attention(in.q, in.k, in.v, expand_block_mask(mask, grid));
    worst = std::max(worst, max_relative_difference(sparse, dense));
    max_tokens = std::max(max_tokens, grid.padded_len());
    ++instances;
  }
  r.cpu_seconds = cpu_now() - t0;
  r.passed = worst <= 1e-6 && r.cpu_seconds < r.cpu_limit_seconds;
  r.detail = "50 instances, max padded tokens " + std::to_string(max_tokens) + ", max rel err " + fmt(worst, 3) +
             " (limit 1e-6)";
  return r;
}

CriterionResult check_linear_growth() {
  auto r = started(2, "linear block growth");
  r.cpu_limit_seconds = 10.0;
  const double t0 = cpu_now();
  const LayoutConfig lc;
  const MaskConfig mc;
  std::vector<std::uint64_t> active;
  std::vector<std::uint64_t> dense;
  for (int n : {4, 8, 16, 32}) {
    const auto grid = block_partition(build_prompt_layout(lc, n), lc.block_size);
    const auto mask = build_mask(grid, mc, 0);
    active.push_back(mask.active_pairs());
    // Dense over the chunk blocks; the fixed system prefix is not sequence length.
    const auto chunk_blocks = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(grid.blocks_per_chunk);
    dense.push_back(chunk_blocks * chunk_blocks);
  }
  bool ok = true;
  std::string ratios;
  for (std::size_t i = 1; i < active.size(); ++i) {
    const double ratio = static_cast<double>(active[i]) / static_cast<double>(active[i - 1]);
    ok = ok && ratio <= 2.5 && dense[i] == 4 * dense[i - 1];
    ratios += (i > 1 ? ", " : "") + fmt(ratio, 3);
  }
  r.cpu_seconds = cpu_now() - t0;
  r.passed = ok && r.cpu_seconds < r.cpu_limit_seconds;
  r.detail = "active pairs " + std::to_string(active[0]) + "/" + std::to_string(active[1]) + "/" +
             std::to_string(active[2]) + "/" + std::to_string(active[3]) + ", doubling ratios " + ratios +
             " (limit 2.5), dense x4 " + (dense[3] == 64 * dense[0] ? "yes" : "no");
  return r;
}

CriterionResult check_speedup(int repeats) {
  auto r = started(3, "qualitative speedup");
  BenchmarkSpec spec;
  spec.n_chunks = {32};
  spec.layout.block_size = 32;
  spec.head_dim = 64;
  spec.repeats = repeats;
  const double t0 = cpu_now();
  const auto row = benchmark(spec).front();
  r.cpu_seconds = cpu_now() - t0;
  // Flops are proportional to pairs, so the ratio test is exact in integers.
  const bool flop_ratio_exact =
      row.estimated_flops_sparse * row.dense_pairs == row.estimated_flops_dense * row.active_pairs;
  r.passed = row.speedup() >= 1.2 && flop_ratio_exact;
  r.detail = "n_chunks 32, block 32, d 64: sparse " + fmt(row.wall_time_sparse * 1e3) + " ms, dense " +
             fmt(row.wall_time_dense * 1e3) + " ms, speedup " + fmt(row.speedup(), 3) + "x (limit 1.2x), flop ratio " +
             (flop_ratio_exact ? "== pair ratio" : "!= pair ratio");
  return r;
}

CriterionResult check_sampler() {
  auto r = started(4, "sampler correctness");
  r.cpu_limit_seconds = 60.0;
  const double t0 = cpu_now();
  const ImportanceConfig cfg;
  Rng rng(77);

  // (a) exact agreement with the brute-force oracle.
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int T = 5 + static_cast<int>(rng.below(60));
    std::vector<double> ax(static_cast<std::size_t>(T));
    std::vector<double> ay(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      ax[static_cast<std::size_t>(t)] = 3.0 * rng.normal();
      ay[static_cast<std::size_t>(t)] = rng.below(4) == 0 ? 2.0 * rng.normal() : 0.0;
    }
    if (importance_scores(ax, ay, cfg) != brute_force_scores(ax, ay, cfg)) {
      ++mismatches;
    }
  }

  // (b) first draw against p.
  std::vector<double> ax(24);
  std::vector<double> ay(24);
  for (std::size_t t = 0; t < ax.size(); ++t) {
    ax[t] = rng.normal();
    ay[t] = 0.5 * rng.normal();
  }
  const auto p = sampling_distribution(importance_scores(ax, ay, cfg), cfg.tau);
  std::vector<double> counts(p.size(), 0.0);
  constexpr int kDraws = 100000;
  for (int s = 0; s < kDraws; ++s) {
    Rng draw(static_cast<std::uint64_t>(s));
    counts[static_cast<std::size_t>(sample_steps(p, 1, cfg.max_gap, draw).front())] += 1.0;
  }
  double tv = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    tv += std::fabs(counts[k] / kDraws - p[k]);
  }
  tv *= 0.5;

  // (c) gap constraint.
  int violations = 0;
  for (int run = 0; run < 1000; ++run) {
    Rng draw(1'000'000 + static_cast<std::uint64_t>(run));
    const int T = 20 + static_cast<int>(draw.below(100));
    const int max_gap = 1 + static_cast<int>(draw.below(10));
    const int n = 1 + static_cast<int>(draw.below(static_cast<std::uint64_t>(std::min(T, 12))));
    std::vector<double> w(static_cast<std::size_t>(T));
    for (auto& x : w) {
      x = draw.uniform() + 1e-3;
    }
    const auto steps = sample_steps(sampling_distribution(w, cfg.tau), n, max_gap, draw);
    bool bad = static_cast<int>(steps.size()) != n;
    for (std::size_t i = 0; i < steps.size() && !bad; ++i) {
      bad = steps[i] < 0 || steps[i] >= T || (i > 0 && (steps[i] <= steps[i - 1] || steps[i] - steps[i - 1] > max_gap));
    }
    violations += bad ? 1 : 0;
  }

  r.cpu_seconds = cpu_now() - t0;
  r.passed = mismatches == 0 && tv <= 0.01 && violations == 0 && r.cpu_seconds < r.cpu_limit_seconds;
  r.detail = "(a) oracle mismatches " + std::to_string(mismatches) + "/100, (b) TV " + fmt(tv, 3) +
             " (limit 0.01), (c) gap violations " + std::to_string(violations) + "/1000";
  return r;
}

CriterionResult check_cces() {
  auto r = started(5, "CCES arithmetic");
  const double t0 = cpu_now();
  const double a = cces_total({0.9756, 0.9880, 0.9833, 0.9927});
  const double b = cces_total({0.9533, 1.0416, 1.0094, 0.9481});

  // The reference method scored against itself.
  CcesTable table;
  table.methods = {"ref", "other"};
  table.metrics = {"red_light", "jerk", "progress", "collision", "offroad"};
  table.category = {CcesCategory::Compliance, CcesCategory::Comfort, CcesCategory::Efficiency, CcesCategory::Safety,
                    CcesCategory::Safety};
  table.fail_rate = {{0.12, 0.30, 0.05, 0.02, 0.07}, {0.10, 0.33, 0.06, 0.01, 0.08}};
  table.reference = "ref";
  const auto scores = cces_aggregate(table);
  const double ref_total = scores.front().total;

  r.cpu_seconds = cpu_now() - t0;
  r.passed = std::fabs(a - 3.9396) <= 1e-4 && std::fabs(b - 3.9524) <= 1e-4 && ref_total == 4.0;
  r.detail = "totals " + fmt(a, 6) + " (3.9396), " + fmt(b, 6) + " (3.9524), reference " + fmt(ref_total, 6);
  return r;
}

CriterionResult check_gradients() {
  auto r = started(6, "gradient integrity");
  r.cpu_limit_seconds = 120.0;
  const double t0 = cpu_now();
  WorldConfig wc;
  wc.event_script = random_event_script(3, wc.episode_len_s);
  const Episode ep = generate_episode(3, wc);
  ModelConfig mc;
  mc.d_model = 8;
  mc.ff_dim = 16;
  mc.n_layers = 2;
  mc.head_init_scale = 1.0;
  mc.seed = 11;
  const Model model = init_model(mc);
  const CurriculumStage stage{3, 1.0, 1, SamplerKind::Uniform, 0.0};
  const auto sample = make_training_sample(ep, 20, stage, mc, "micro");
  const LossWeights w;
  const auto grad = flat_gradient(model, sample, w);
  const auto params = model.flat_parameters();
  Model probe = model;
  const double err = finite_diff_check(
      [&](std::span<const double> x) {
        probe.set_flat_parameters(x);
        return sample_loss(probe, sample, w).total;
      },
      params, grad, 1e-6);
  r.cpu_seconds = cpu_now() - t0;
  r.passed = err <= 1e-4 && r.cpu_seconds < r.cpu_limit_seconds;
  r.detail = std::to_string(params.size()) + " params, 2 layers, max rel err " + fmt(err, 3) + " (limit 1e-4)";
  return r;
}

CriterionResult check_ablation(const ExperimentPlan& plan, const std::filesystem::path& work_dir) {
  auto r = started(7, "directional ablation");
  r.cpu_limit_seconds = 30.0 * 60.0;
  const double t0 = cpu_now();
  const auto result = run_ablation(plan, work_dir);
  r.cpu_seconds = cpu_now() - t0;

  struct Check {
    const char* name;
    PlanId candidate;
    PlanId baseline;
    const char* metric;
    double ArmMetrics::*field;
  };
  const Check checks[] = {
      {"(a)", PlanId::ChunkH6, PlanId::FramewiseH1, "rollout_error", &ArmMetrics::rollout_error},
      {"(b)", PlanId::ChunkH21Clef, PlanId::ChunkH21Cl, "far_obs_error", &ArmMetrics::far_obs_error},
      {"(c)", PlanId::ChunkH21ClefTis, PlanId::ChunkH21Clef, "event_error", &ArmMetrics::event_error},
  };
  bool ok = r.cpu_seconds < r.cpu_limit_seconds;
  std::ostringstream detail;
  std::ostringstream diag;
  diag << std::fixed << std::setprecision(4);
  for (const auto& c : checks) {
    const double cand = result.arm(c.candidate).median.*c.field;
    const double base = result.arm(c.baseline).median.*c.field;
    const double margin = base > 0.0 ? 1.0 - cand / base : 0.0;
    const bool pass = margin >= 0.05;
    ok = ok && pass;
    detail << c.name << ' ' << (pass ? "ok" : "FAIL") << " margin " << fmt(100.0 * margin, 3) << "% ";
    diag << "  " << c.name << ' ' << to_string(c.candidate) << " vs " << to_string(c.baseline) << " on " << c.metric
         << ": " << cand << " vs " << base << ", margin " << std::setprecision(1) << 100.0 * margin
         << std::setprecision(4) << "% (need >= 5%)\n";
  }
  diag << "  arm";
  for (const auto& col : kMetricColumns) {
    diag << ' ' << col;
  }
  diag << '\n';
  for (const auto& arm : result.arms) {
    for (std::size_t s = 0; s <= arm.per_seed.size(); ++s) {
      const bool median_row = s == arm.per_seed.size();
      diag << "  " << to_string(arm.arm) << (median_row ? " median" : " seed" + std::to_string(arm.seeds[s]));
      for (double v : metric_values(median_row ? arm.median : arm.per_seed[s])) {
        diag << ' ' << v;
      }
      diag << '\n';
    }
  }
  r.passed = ok;
  r.detail = detail.str() + "(" + std::to_string(plan.seeds.size()) + " seeds, " + fmt(r.cpu_seconds / 60.0, 3) +
             " CPU-min, limit 30)";
  r.diagnostics = diag.str();
  return r;
}

CriterionResult check_rollout_consistency(const std::filesystem::path& work_dir) {
  auto r = started(8, "rollout consistency");
  const double t0 = cpu_now();
  WorldConfig wc;
  wc.event_script = random_event_script(5, wc.episode_len_s);
  const Episode ep = generate_episode(5, wc);
  ModelConfig mc;
  mc.seed = 5;
  mc.head_init_scale = 1.0;
  const Model model = init_model(mc);

  const int start = 24;
  const std::vector<ChunkInput> ctx{chunk_from_episode(ep, start - 4, mc, 1.0), chunk_from_episode(ep, start, mc, 1.0)};
  RolloutOptions ro;
  ro.horizon_s = 6.0;
  ro.frame_dim = wc.frame_dim;
  const auto trace = closed_loop_rollout(model, ctx, start, ro);
  const auto tf = forward(model, Prompt{ctx});
  const auto& cl = trace.chunk_predictions.front();
  // Teacher-forced outputs of the newest context chunk.
  auto tail = [](const Matrix& m, std::size_t rows) {
    Matrix out(rows, m.cols());
    std::copy(m.values().end() - static_cast<std::ptrdiff_t>(out.size()), m.values().end(), out.values().begin());
    return out;
  };
  const double tf_diff = std::max({max_abs_difference(tail(tf.obs, cl.obs.rows()), cl.obs),
                                   max_abs_difference(tail(tf.actions, cl.actions.rows()), cl.actions),
                                   max_abs_difference(tail(tf.bev, 1), cl.bev)});

  const Model copier = make_copy_last_chunk_model(mc);
  const auto ctrace = closed_loop_rollout(copier, ctx, start, ro);
  // Every rolled chunk repeats the newest context chunk frame for frame.
  double copy_spread = 0.0;
  const auto V = static_cast<std::size_t>(mc.layout.n_views);
  const auto F = static_cast<std::size_t>(mc.layout.obs_frames_per_chunk);
  for (std::size_t i = 0; i < ctrace.latents.size(); ++i) {
    const auto& frame = ctrace.latents[i];
    for (std::size_t v = 0; v < V; ++v) {
      const auto ref = ctx.back().obs.row((i % F) * V + v);
      for (std::size_t c = 0; c < frame.cols(); ++c) {
        copy_spread = std::max(copy_spread, std::fabs(frame(v, c) - ref[c]));
      }
    }
  }

  // Paired drift comparisons: sink on/off with a short window, augmentation
  // on/off in training mode.
  std::filesystem::create_directories(work_dir);
  std::vector<ChunkInput> long_ctx;
  for (int s = start - 12; s <= start; s += 4) {
    long_ctx.push_back(chunk_from_episode(ep, s, mc, 1.0));
  }
  auto run = [&](bool sink, bool training, double sigma) {
    RolloutOptions o = ro;
    o.horizon_s = 12.0;
    o.window_chunks = 2;
    o.use_latent_sink = sink;
    o.training_mode = training;
    o.latent_aug_sigma = sigma;
    o.seed = 9;
    const auto t = closed_loop_rollout(model, long_ctx, start, o);
    return rollout_drift({t.steps, t.latents}, ep);
  };
  bool csv_ok = true;
  auto write_pair = [&](const std::filesystem::path& path, const char* a_name, const DriftReport& a,
                        const char* b_name, const DriftReport& b) {
    std::ofstream out(path);
    out << "step," << a_name << ',' << b_name << '\n';
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      out << a.steps[i] << ',' << a.error[i] << ',' << b.error[i] << '\n';
    }
    csv_ok = csv_ok && out.good() && !a.steps.empty() && a.steps == b.steps;
  };
  try {
    write_pair(work_dir / "drift_sink.csv", "sink_on", run(true, false, 0.0), "sink_off", run(false, false, 0.0));
    write_pair(work_dir / "drift_aug.csv", "plain", run(true, true, 0.0), "augmented", run(true, true, 0.05));
  } catch (const std::exception&) {
    csv_ok = false;
  }

  r.cpu_seconds = cpu_now() - t0;
  r.passed = tf_diff <= 1e-10 && copy_spread <= 1e-10 && csv_ok;
  r.detail = "TF vs closed-loop step 1 max diff " + fmt(tf_diff, 3) + " (limit 1e-10), copier spread " +
             fmt(copy_spread, 3) + ", paired CSVs " + (csv_ok ? "written" : "FAILED");
  return r;
}

CriterionResult check_rectified_flow() {
  auto r = started(9, "rectified flow");
  r.cpu_limit_seconds = 30.0;
  const double t0 = cpu_now();
  Rng rng(31);
  bool endpoints = true;
  bool zero_loss = true;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> y0(8);
    std::vector<double> y1(8);
    std::vector<double> v(8);
    for (std::size_t j = 0; j < 8; ++j) {
      y0[j] = 10.0 * rng.normal();
      y1[j] = 10.0 * rng.normal();
      v[j] = y1[j] - y0[j];
    }
    endpoints = endpoints && rf_interpolate(y0, y1, 0.0) == y0 && rf_interpolate(y0, y1, 1.0) == y1;
    zero_loss = zero_loss && rf_velocity_loss(v, y0, y1) == 0.0;
  }

  const auto data = make_rf_toy(4000, 17);
  const auto trained = train_linear_velocity(data, 0.05, 20000);
  // Closed form: ordinary least squares of (y1 - y0) on [y_t, t, 1].
  Eigen::MatrixXd X(static_cast<Eigen::Index>(data.size()), 4);
  Eigen::MatrixXd Y(static_cast<Eigen::Index>(data.size()), 2);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    const double t = data.t[i];
    X(e, 0) = (1.0 - t) * data.y0(i, 0) + t * data.y1(i, 0);
    X(e, 1) = (1.0 - t) * data.y0(i, 1) + t * data.y1(i, 1);
    X(e, 2) = t;
    X(e, 3) = 1.0;
    Y(e, 0) = data.y1(i, 0) - data.y0(i, 0);
    Y(e, 1) = data.y1(i, 1) - data.y0(i, 1);
  }
  const Eigen::MatrixXd W = X.colPivHouseholderQr().solve(Y).transpose();
  double diff = 0.0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 4; ++b) {
      diff = std::max(diff, std::fabs(W(a, b) - trained.weights(static_cast<std::size_t>(a), static_cast<std::size_t>(b))));
    }
  }
  r.cpu_seconds = cpu_now() - t0;
  r.passed = endpoints && zero_loss && diff <= 1e-3 && r.cpu_seconds < r.cpu_limit_seconds;
  r.detail = std::string("endpoints ") + (endpoints ? "exact" : "INEXACT") + ", loss at y1-y0 " +
             (zero_loss ? "zero" : "NONZERO") + ", |W - W_ls| max " + fmt(diff, 3) + " (limit 1e-3)";
  return r;
}

// ---------------------------------------------------------------------------

std::string format_result_line(const CriterionResult& r) {
  std::ostringstream os;
  os << "[" << (r.passed ? "PASS" : "FAIL") << "] criterion " << r.id << ": " << r.title << " -- " << r.detail
     << " [" << std::fixed << std::setprecision(1) << r.cpu_seconds << " s CPU]";
  return os.str();
}

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts, std::ostream& out) {
  const auto work = opts.work_dir.empty() ? std::filesystem::temp_directory_path() / "foresight_acceptance"
                                          : opts.work_dir;
  std::vector<CriterionResult> results;
  for (int id : opts.criteria) {
    CriterionResult r;
    try {
      switch (id) {
        case 1: r = check_oracle_equivalence(); break;
        case 2: r = check_linear_growth(); break;
        case 3: r = check_speedup(opts.bench_repeats); break;
        case 4: r = check_sampler(); break;
        case 5: r = check_cces(); break;
        case 6: r = check_gradients(); break;
        case 7: r = check_ablation(opts.plan, work / "ablation"); break;
        case 8: r = check_rollout_consistency(work / "rollout"); break;
        case 9: r = check_rectified_flow(); break;
        default: throw ConfigError("acceptance: no criterion " + std::to_string(id));
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      r.id = id;
      r.title = "error";
      r.passed = false;
      r.detail = e.what();
    }
    out << format_result_line(r) << '\n';
    if (!r.diagnostics.empty()) {
      out << r.diagnostics;
    }
    out.flush();
    results.push_back(std::move(r));
  }
  return results;
}

int acceptance_exit_code(const std::vector<CriterionResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CriterionResult& r) { return r.passed; }) ? 0 : 4;
}

}  // namespace foresight
