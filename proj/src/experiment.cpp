#include "foresight/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/metrics.hpp"

namespace foresight {

const char* const kCodeVersion = "foresight-0.1.0";

const std::vector<std::string> kMetricColumns = {"lat_ade",       "long_ade",    "lat_fde",      "long_fde",
                                                 "rollout_error", "event_error", "far_obs_error"};

std::vector<double> metric_values(const ArmMetrics& m) {
  return {m.lat_ade, m.long_ade, m.lat_fde, m.long_fde, m.rollout_error, m.event_error, m.far_obs_error};
}

namespace {

ArmMetrics metrics_from_values(const std::vector<double>& v) {
  return {v.at(0), v.at(1), v.at(2), v.at(3), v.at(4), v.at(5), v.at(6)};
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t fnv1a(const std::string& text) { return std::stoull(fnv1a_hex(text), nullptr, 16); }

}  // namespace

// ---------------------------------------------------------------------------
// Plan

void EvalProtocol::validate() const {
  if (n_episodes < 1 || anchors_per_episode < 1) {
    throw ConfigError("eval: need at least one episode and one anchor");
  }
  for (double h : {rollout_horizon_s, far_horizon_s}) {
    if (!(h > 0.0) || std::abs(h - std::round(h)) > 1e-9) {
      throw ConfigError("eval: horizons must be positive multiples of the 1 s chunk duration");
    }
  }
  if (latent_aug_sigma < 0.0) {
    throw ConfigError("eval: latent_aug_sigma must be >= 0");
  }
}

void to_json(nlohmann::json& j, const EvalProtocol& p) {
  j = nlohmann::json{{"episode_seed", p.episode_seed},         {"n_episodes", p.n_episodes},
                     {"anchors_per_episode", p.anchors_per_episode}, {"rollout_horizon_s", p.rollout_horizon_s},
                     {"far_horizon_s", p.far_horizon_s},       {"latent_aug_sigma", p.latent_aug_sigma}};
}

void from_json(const nlohmann::json& j, EvalProtocol& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "episode_seed") {
      p.episode_seed = value.get<std::uint64_t>();
    } else if (key == "n_episodes") {
      p.n_episodes = value.get<int>();
    } else if (key == "anchors_per_episode") {
      p.anchors_per_episode = value.get<int>();
    } else if (key == "rollout_horizon_s") {
      p.rollout_horizon_s = value.get<double>();
    } else if (key == "far_horizon_s") {
      p.far_horizon_s = value.get<double>();
    } else if (key == "latent_aug_sigma") {
      p.latent_aug_sigma = value.get<double>();
    } else {
      throw ConfigError("eval: unknown key '" + key + "'");
    }
  }
}

void ExperimentPlan::validate() const {
  if (arms.empty()) {
    throw ConfigError("experiment: no arms");
  }
  if (seeds.empty()) {
    throw ConfigError("experiment: the seed set must be nonempty");
  }
  if (batch_size < 1 || train_episodes < 1 || workers < 1) {
    throw ConfigError("experiment: batch_size, train_episodes and workers must be >= 1");
  }
  if (!(schedule.learning_rate > 0.0)) {
    throw ConfigError("experiment: schedule.learning_rate must be > 0");
  }
  model.validate();
  world.validate();
  sampler.validate();
  loss.validate();
  eval.validate();
  if (world.n_views != model.layout.n_views || world.latent_dim != model.latent_dim ||
      world.latent_dim != model.bev_dim) {
    throw ConfigError("experiment: world views/latent_dim must match the model");
  }
  if (!world.event_script.empty()) {
    throw ConfigError("experiment: episodes draw their own event scripts; world.event_script must be empty");
  }
  for (PlanId arm : arms) {
    if (arm_window(*this, arm) > model.max_chunks) {
      throw ConfigError("experiment: arm " + std::string(to_string(arm)) + " needs more chunks than max_chunks");
    }
  }
}

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  nlohmann::json arms = nlohmann::json::array();
  for (PlanId a : p.arms) {
    arms.push_back(to_string(a));
  }
  j = nlohmann::json{{"plan_id", p.plan_id},
                     {"arms", arms},
                     {"seeds", p.seeds},
                     {"schedule", p.schedule},
                     {"model", p.model},
                     {"world", p.world},
                     {"sampler", p.sampler},
                     {"loss", p.loss},
                     {"batch_size", p.batch_size},
                     {"train_episodes", p.train_episodes},
                     {"momentum", p.momentum},
                     {"clip_norm", p.clip_norm},
                     {"eval", p.eval},
                     {"workers", p.workers}};
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "plan_id") {
      p.plan_id = value.get<std::string>();
    } else if (key == "arms") {
      p.arms.clear();
      for (const auto& a : value) {
        p.arms.push_back(plan_id_from_string(a.get<std::string>()));
      }
    } else if (key == "seeds") {
      p.seeds = value.get<std::vector<std::uint64_t>>();
    } else if (key == "schedule") {
      from_json(value, p.schedule);
    } else if (key == "model") {
      from_json(value, p.model);
    } else if (key == "world") {
      from_json(value, p.world);
    } else if (key == "sampler") {
      from_json(value, p.sampler);
    } else if (key == "loss") {
      from_json(value, p.loss);
    } else if (key == "batch_size") {
      p.batch_size = value.get<int>();
    } else if (key == "train_episodes") {
      p.train_episodes = value.get<int>();
    } else if (key == "momentum") {
      p.momentum = value.get<double>();
    } else if (key == "clip_norm") {
      p.clip_norm = value.get<double>();
    } else if (key == "eval") {
      from_json(value, p.eval);
    } else if (key == "workers") {
      p.workers = value.get<int>();
    } else {
      throw ConfigError("experiment: unknown key '" + key + "'");
    }
  }
}

ExperimentPlan preset_plan(const std::string& name) {
  ExperimentPlan p;
  p.plan_id = name;
  if (name == "full") {
    return p;
  }
  if (name == "framewise_vs_chunk") {
    p.arms = {PlanId::FramewiseH1, PlanId::ChunkH6, PlanId::ChunkH21Cl};
    return p;
  }
  throw ConfigError("unknown plan '" + name + "' (expected full or framewise_vs_chunk)");
}

std::vector<CurriculumStage> arm_schedule(const ExperimentPlan& plan, PlanId arm) {
  int budget = 0;
  for (int s : plan.schedule.stage_steps) {
    budget += s;
  }
  auto stages = equalize_budget(stage_schedule(arm, plan.schedule), budget);
  for (auto& s : stages) {
    if (s.learning_rate <= 0.0) {
      s.learning_rate = plan.schedule.learning_rate;
    }
  }
  return stages;
}

int arm_window(const ExperimentPlan& plan, PlanId arm) {
  int h = 1;
  for (const auto& s : stage_schedule(arm, plan.schedule)) {
    h = std::max(h, s.horizon);
  }
  return h;
}

std::string plan_fingerprint(const ExperimentPlan& plan) {
  nlohmann::json j = plan;
  j.erase("workers");  // does not affect results
  return fnv1a_hex(j.dump() + kCodeVersion);
}

std::string protocol_fingerprint(const ExperimentPlan& plan) {
  const nlohmann::json j = {{"eval", plan.eval}, {"world", plan.world}, {"model_layout", plan.model.layout}};
  return fnv1a_hex(j.dump() + kCodeVersion);
}

const ArmResult& AblationResult::arm(PlanId id) const {
  for (const auto& a : arms) {
    if (a.arm == id) {
      return a;
    }
  }
  throw PreconditionError("ablation result has no arm " + std::string(to_string(id)));
}

// ---------------------------------------------------------------------------
// Data

namespace {

Episode episode_for(std::uint64_t seed, const WorldConfig& base) {
  WorldConfig cfg = base;
  cfg.event_script = random_event_script(seed, cfg.episode_len_s, cfg.control_hz);
  return generate_episode(seed, cfg);
}

}  // namespace

TrainingData make_training_data(const ExperimentPlan& plan, std::uint64_t seed) {
  TrainingData data;
  for (int i = 0; i < plan.train_episodes; ++i) {
    data.episodes.push_back(episode_for(seed * 1000 + static_cast<std::uint64_t>(i), plan.world));
  }
  return data;
}

std::vector<Episode> make_eval_episodes(const ExperimentPlan& plan) {
  std::vector<Episode> eps;
  for (int i = 0; i < plan.eval.n_episodes; ++i) {
    eps.push_back(episode_for(plan.eval.episode_seed + static_cast<std::uint64_t>(i), plan.world));
  }
  return eps;
}

std::vector<int> eval_anchors(const Episode& ep, const ExperimentPlan& plan) {
  const int lo = min_anchor_step(plan.model);
  const int far_steps = static_cast<int>(std::lround(plan.eval.far_horizon_s / kControlPeriodS));
  const int hi = ep.n_steps - 1 - far_steps;
  if (hi < lo) {
    throw ConfigError("eval: episodes are too short for the far horizon");
  }
  const int n = plan.eval.anchors_per_episode;
  std::vector<int> anchors;
  for (int i = 0; i < n; ++i) {
    anchors.push_back(n == 1 ? lo : lo + static_cast<int>(std::lround(static_cast<double>(i) * (hi - lo) / (n - 1))));
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// Training

void train_stage(Model& model, const CurriculumStage& stage, int stage_index, const TrainingData& data,
                 const ExperimentPlan& plan, std::uint64_t seed, std::ostream* loss_csv) {
  stage.validate();
  const nlohmann::json key = {{"stage", stage}, {"index", stage_index}, {"seed", seed}};
  Rng rng(fnv1a(key.dump()));
  Optimizer opt;
  opt.momentum = plan.momentum;
  opt.clip_norm = plan.clip_norm;
  const double lr = stage.learning_rate > 0.0 ? stage.learning_rate : plan.schedule.learning_rate;
  const int lo = min_anchor_step(plan.model);

  // Per-episode anchor distributions over the valid anchor range.
  std::vector<std::vector<double>> tis_p(data.episodes.size());
  if (stage.sampler == SamplerKind::Tis) {
    for (std::size_t e = 0; e < data.episodes.size(); ++e) {
      const auto& ep = data.episodes[e];
      const int hi = max_anchor_step(ep, stage);
      const auto w = importance_scores(ep.a_x, ep.a_y, plan.sampler);
      tis_p[e] = sampling_distribution(std::span<const double>(w).subspan(
                                           static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo + 1)),
                                       plan.sampler.tau);
    }
  }
  for (int step = 0; step < stage.train_steps; ++step) {
    const auto e = static_cast<std::size_t>(rng.below(data.episodes.size()));
    const auto& ep = data.episodes[e];
    const int hi = max_anchor_step(ep, stage);
    if (hi - lo + 1 < plan.batch_size) {
      throw ConfigError("train: episodes too short for horizon " + std::to_string(stage.horizon) + " at stride " +
                        std::to_string(stage.stride_s) + " s");
    }
    const std::vector<int> offsets = stage.sampler == SamplerKind::Tis
                                         ? sample_steps(tis_p[e], plan.batch_size, plan.sampler.max_gap, rng)
                                         : uniform_baseline(hi - lo + 1, plan.batch_size, rng);
    std::vector<TrainingSample> batch;
    for (int off : offsets) {
      batch.push_back(make_training_sample(ep, lo + off, stage, plan.model,
                                           "ep" + std::to_string(e) + "@" + std::to_string(lo + off)));
    }
    const auto l = train_step(model, opt, batch, plan.loss, lr);
    if (loss_csv != nullptr) {
      *loss_csv << stage_index << ',' << step << ',' << l.action << ',' << l.camera << ',' << l.bev << ',' << l.total
                << '\n';
    }
  }
}

double gradient_spot_check(const Model& model, const TrainingSample& sample, const LossWeights& w, int n_coords,
                           std::uint64_t seed) {
  const auto grad = flat_gradient(model, sample, w);
  auto params = model.flat_parameters();
  Model probe = model;
  Rng rng(seed);
  double worst = 0.0;
  constexpr double eps = 1e-6;
  for (int i = 0; i < n_coords; ++i) {
    const auto c = static_cast<std::size_t>(rng.below(params.size()));
    const double saved = params[c];
    params[c] = saved + eps;
    probe.set_flat_parameters(params);
    const double up = sample_loss(probe, sample, w).total;
    params[c] = saved - eps;
    probe.set_flat_parameters(params);
    const double down = sample_loss(probe, sample, w).total;
    params[c] = saved;
    const double fd = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(fd - grad[c]) / std::max(1.0, std::abs(grad[c])));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Evaluation

ArmMetrics evaluate_arm(const Model& model, const ExperimentPlan& plan, PlanId arm,
                        const std::vector<Episode>& eval_episodes, std::vector<DriftRow>* drift,
                        std::uint64_t seed) {
  const auto& cfg = model.config();
  const int window = arm_window(plan, arm);
  const double final_stride = arm_schedule(plan, arm).back().stride_s;
  const int far_steps = static_cast<int>(std::lround(plan.eval.far_horizon_s / kControlPeriodS));
  ArmMetrics m;
  int n_anchor = 0;
  double event_sum = 0.0;
  int event_count = 0;
  std::map<int, std::array<double, 3>> drift_sum;
  std::map<int, int> drift_n;

  RolloutOptions base;
  base.stride_s = 1.0;
  base.use_latent_sink = true;
  base.latent_aug_sigma = plan.eval.latent_aug_sigma;
  base.window_chunks = window;
  base.frame_dim = plan.world.frame_dim;

  for (const auto& ep : eval_episodes) {
    for (int anchor : eval_anchors(ep, plan)) {
      ++n_anchor;
      const ChunkInput ctx = chunk_from_episode(ep, anchor, cfg, 1.0);

      // Single forward step, trajectory metrics.
      const Predictions one = forward(model, Prompt{{ctx}});
      TrajectoryPair pair;
      double px = ep.x[static_cast<std::size_t>(anchor)];
      double py = ep.y[static_cast<std::size_t>(anchor)];
      for (std::size_t j = 0; j < one.actions.rows(); ++j) {
        px += one.actions(j, 0);
        py += one.actions(j, 1);
        const auto s = static_cast<std::size_t>(anchor) + j + 1;
        pair.pred.push_back({px, py});
        pair.gt.push_back({ep.x[s], ep.y[s]});
      }
      const auto de = ade_fde(pair);
      m.lat_ade += de.lat_ade;
      m.long_ade += de.long_ade;
      m.lat_fde += de.lat_fde;
      m.long_fde += de.long_fde;

      // Closed-loop rollout at 1 s stride.
      RolloutOptions near = base;
      near.horizon_s = plan.eval.rollout_horizon_s;
      const auto near_trace = closed_loop_rollout(model, {ctx}, anchor, near);
      const auto near_drift = rollout_drift({near_trace.steps, near_trace.latents}, ep);
      double mean = 0.0;
      for (double e : near_drift.error) {
        mean += e;
      }
      m.rollout_error += mean / static_cast<double>(near_drift.error.size());

      // Far horizon at the arm's own final stride.
      RolloutOptions far = base;
      far.horizon_s = plan.eval.far_horizon_s;
      far.stride_s = final_stride;
      const ChunkInput far_ctx = chunk_from_episode(ep, anchor, cfg, final_stride);
      const auto far_trace = closed_loop_rollout(model, {far_ctx}, anchor, far);
      const auto far_drift = rollout_drift({far_trace.steps, far_trace.latents}, ep);
      if (far_trace.steps.back() != anchor + far_steps) {
        throw RuntimeFailure("eval: far rollout does not end at the far horizon");
      }
      m.far_obs_error += far_drift.error.back();
      event_sum += far_drift.event_mean * far_drift.event_steps;
      event_count += far_drift.event_steps;

      if (drift != nullptr) {
        RolloutOptions d = base;
        d.horizon_s = plan.eval.far_horizon_s;
        const auto on = final_stride == 1.0 ? far_drift : rollout_drift([&] {
          const auto t = closed_loop_rollout(model, {ctx}, anchor, d);
          return RolloutFrames{t.steps, t.latents};
        }(), ep);
        d.use_latent_sink = false;
        const auto t_off = closed_loop_rollout(model, {ctx}, anchor, d);
        const auto off = rollout_drift({t_off.steps, t_off.latents}, ep);
        d.use_latent_sink = true;
        d.training_mode = true;
        d.seed = seed * 7919 + static_cast<std::uint64_t>(n_anchor);
        const auto t_aug = closed_loop_rollout(model, {ctx}, anchor, d);
        const auto aug = rollout_drift({t_aug.steps, t_aug.latents}, ep);
        for (std::size_t i = 0; i < on.steps.size(); ++i) {
          const int off_step = on.steps[i] - anchor;
          auto& acc = drift_sum[off_step];
          acc[0] += on.error[i];
          acc[1] += off.error[i];
          acc[2] += aug.error[i];
          ++drift_n[off_step];
        }
      }
    }
  }
  const double inv = 1.0 / n_anchor;
  m.lat_ade *= inv;
  m.long_ade *= inv;
  m.lat_fde *= inv;
  m.long_fde *= inv;
  m.rollout_error *= inv;
  m.far_obs_error *= inv;
  m.event_error = event_count > 0 ? event_sum / event_count : 0.0;
  if (drift != nullptr) {
    for (const auto& [off, acc] : drift_sum) {
      const double n = drift_n[off];
      drift->push_back({seed, off, acc[0] / n, acc[1] / n, acc[2] / n});
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string stage_key(const ExperimentPlan& plan, std::uint64_t seed, const std::vector<CurriculumStage>& prefix) {
  const nlohmann::json j = {{"model", plan.model},
                            {"world", plan.world},
                            {"sampler", plan.sampler},
                            {"loss", plan.loss},
                            {"batch_size", plan.batch_size},
                            {"train_episodes", plan.train_episodes},
                            {"momentum", plan.momentum},
                            {"clip_norm", plan.clip_norm},
                            {"seed", seed},
                            {"stages", prefix}};
  return fnv1a_hex(j.dump() + kCodeVersion);
}

struct SeedOutcome {
  std::map<PlanId, ArmMetrics> metrics;
  std::map<PlanId, std::vector<DriftRow>> drift;
  std::map<PlanId, std::string> loss_curves;
};

SeedOutcome run_seed(const ExperimentPlan& plan, std::uint64_t seed, const std::vector<Episode>& eval_eps,
                     const std::filesystem::path& out_dir, const ProgressFn& progress) {
  namespace fs = std::filesystem;
  SeedOutcome outcome;
  const TrainingData data = make_training_data(plan, seed);
  ModelConfig mcfg = plan.model;
  mcfg.seed = plan.model.seed + seed;
  const fs::path ckpt_dir = out_dir.empty() ? fs::path{} : out_dir / "checkpoints" / ("seed" + std::to_string(seed));
  if (!ckpt_dir.empty()) {
    fs::create_directories(ckpt_dir);
  }
  std::map<std::string, std::pair<Model, std::string>> memo;  // key -> (model, loss rows)

  for (PlanId arm : plan.arms) {
    const auto stages = arm_schedule(plan, arm);
    Model model = init_model(mcfg);
    std::string losses;
    bool checked = false;
    std::vector<CurriculumStage> prefix;
    for (std::size_t si = 0; si < stages.size(); ++si) {
      prefix.push_back(stages[si]);
      const std::string key = stage_key(plan, seed, prefix);
      if (auto it = memo.find(key); it != memo.end()) {
        model = it->second.first;
        losses += it->second.second;
        continue;
      }
      const fs::path ckpt = ckpt_dir.empty() ? fs::path{} : ckpt_dir / (key + ".fsck");
      const fs::path loss_file = ckpt_dir.empty() ? fs::path{} : ckpt_dir / (key + ".loss.csv");
      if (!ckpt.empty() && fs::exists(ckpt)) {
        std::ifstream in(ckpt, std::ios::binary);
        model = load_checkpoint(in);
        std::ifstream lin(loss_file);
        std::stringstream ss;
        ss << lin.rdbuf();
        losses += ss.str();
        memo.emplace(key, std::pair{model, ss.str()});
        if (progress) {
          progress("seed " + std::to_string(seed) + " " + std::string(to_string(arm)) + ": reused stage " +
                   std::to_string(si + 1));
        }
        continue;
      }
      if (!checked) {
        const int lo = min_anchor_step(plan.model);
        const auto sample = make_training_sample(data.episodes.front(), lo, stages[si], plan.model, "sanity");
        const double err = gradient_spot_check(model, sample, plan.loss, 4, seed);
        if (!(err <= 1e-4)) {
          throw RuntimeFailure("arm " + std::string(to_string(arm)) + ", seed " + std::to_string(seed) +
                               ": gradient sanity check failed (relative error " + std::to_string(err) + ")");
        }
        checked = true;
      }
      if (progress) {
        progress("seed " + std::to_string(seed) + " " + std::string(to_string(arm)) + ": training stage " +
                 std::to_string(si + 1) + " (H=" + std::to_string(stages[si].horizon) +
                 ", stride=" + std::to_string(stages[si].stride_s).substr(0, 4) + " s, " +
                 std::string(to_string(stages[si].sampler)) + ", " + std::to_string(stages[si].train_steps) +
                 " steps)");
      }
      std::ostringstream rows;
      train_stage(model, stages[si], static_cast<int>(si), data, plan, seed, &rows);
      losses += rows.str();
      memo.emplace(key, std::pair{model, rows.str()});
      if (!ckpt.empty()) {
        const fs::path tmp = ckpt.string() + ".tmp";
        {
          std::ofstream out(tmp, std::ios::binary);
          save_checkpoint(out, model);
        }
        std::ofstream(loss_file) << rows.str();
        fs::rename(tmp, ckpt);
      }
    }
    if (progress) {
      progress("seed " + std::to_string(seed) + " " + std::string(to_string(arm)) + ": evaluating");
    }
    std::vector<DriftRow> drift;
    outcome.metrics[arm] = evaluate_arm(model, plan, arm, eval_eps, &drift, seed);
    outcome.drift[arm] = std::move(drift);
    outcome.loss_curves[arm] = std::move(losses);
  }
  return outcome;
}

void write_metrics_csv(std::ostream& out, const std::string& fingerprint, const ArmResult& r) {
  out << "fingerprint,seed";
  for (const auto& c : kMetricColumns) {
    out << ',' << c;
  }
  out << '\n';
  out.precision(10);
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    out << fingerprint << ',' << r.seeds[i];
    for (double v : metric_values(r.per_seed[i])) {
      out << ',' << v;
    }
    out << '\n';
  }
  out << fingerprint << ",median";
  for (double v : metric_values(r.median)) {
    out << ',' << v;
  }
  out << '\n';
}

}  // namespace

AblationResult run_ablation(const ExperimentPlan& plan, const std::filesystem::path& output_dir,
                            const ProgressFn& progress) {
  namespace fs = std::filesystem;
  plan.validate();
  // Fairness: identical budgets, shared model config and eval episodes.
  const int budget = total_steps(arm_schedule(plan, plan.arms.front()));
  for (PlanId arm : plan.arms) {
    if (total_steps(arm_schedule(plan, arm)) != budget) {
      throw PreconditionError("experiment: arm " + std::string(to_string(arm)) + " has a different step budget");
    }
  }
  AblationResult result;
  result.fingerprint = plan_fingerprint(plan);
  const std::string protocol = protocol_fingerprint(plan);
  if (!output_dir.empty()) {
    fs::create_directories(output_dir);
    nlohmann::json meta = {{"fingerprint", result.fingerprint},
                           {"protocol", protocol},
                           {"code_version", kCodeVersion},
                           {"plan", plan},
                           {"horizon_mapping", {{"H1", 1}, {"H6", plan.schedule.mid_horizon},
                                                {"H21", plan.schedule.long_horizon}}}};
    for (PlanId arm : plan.arms) {
      meta["arm_windows"][std::string(to_string(arm))] = arm_window(plan, arm);
      meta["arm_stages"][std::string(to_string(arm))] = arm_schedule(plan, arm);
    }
    std::ofstream(output_dir / "plan.json") << meta.dump(2) << '\n';
  }
  const auto eval_eps = make_eval_episodes(plan);

  std::vector<SeedOutcome> outcomes(plan.seeds.size());
  if (plan.workers > 1) {
    // Seeds are independent jobs; results are gathered in seed order.
    std::vector<std::future<SeedOutcome>> jobs;
    std::size_t next = 0;
    while (next < plan.seeds.size() || !jobs.empty()) {
      while (next < plan.seeds.size() && jobs.size() < static_cast<std::size_t>(plan.workers)) {
        jobs.push_back(std::async(std::launch::async, run_seed, std::cref(plan), plan.seeds[next],
                                  std::cref(eval_eps), output_dir, progress));
        ++next;
      }
      const std::size_t first = next - jobs.size();
      outcomes[first] = jobs.front().get();
      jobs.erase(jobs.begin());
    }
  } else {
    for (std::size_t i = 0; i < plan.seeds.size(); ++i) {
      outcomes[i] = run_seed(plan, plan.seeds[i], eval_eps, output_dir, progress);
    }
  }

  for (PlanId arm : plan.arms) {
    ArmResult r;
    r.arm = arm;
    r.seeds = plan.seeds;
    std::vector<std::vector<double>> cols(kMetricColumns.size());
    for (auto& o : outcomes) {
      r.per_seed.push_back(o.metrics.at(arm));
      const auto v = metric_values(o.metrics.at(arm));
      for (std::size_t c = 0; c < v.size(); ++c) {
        cols[c].push_back(v[c]);
      }
      r.drift.insert(r.drift.end(), o.drift[arm].begin(), o.drift[arm].end());
    }
    std::vector<double> med;
    for (auto& c : cols) {
      med.push_back(median(c));
    }
    r.median = metrics_from_values(med);
    if (!output_dir.empty()) {
      const fs::path dir = output_dir / std::string(to_string(arm));
      fs::create_directories(dir);
      std::ofstream mout(dir / "metrics.csv");
      write_metrics_csv(mout, result.fingerprint, r);
      std::ofstream dout(dir / "drift.csv");
      dout << "seed,offset_step,sink_on,sink_off,augmented\n";
      dout.precision(10);
      for (const auto& d : r.drift) {
        dout << d.seed << ',' << d.offset_step << ',' << d.sink_on << ',' << d.sink_off << ',' << d.augmented << '\n';
      }
      std::ofstream lout(dir / "loss.csv");
      lout << "seed,stage,step,action,camera,bev,total\n";
      for (std::size_t i = 0; i < outcomes.size(); ++i) {
        std::istringstream rows(outcomes[i].loss_curves[arm]);
        std::string line;
        while (std::getline(rows, line)) {
          lout << plan.seeds[i] << ',' << line << '\n';
        }
      }
    }
    result.arms.push_back(std::move(r));
  }
  if (!output_dir.empty()) {
    std::ofstream tout(output_dir / "table.csv");
    write_result_table(tout, result, protocol);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Tables

void write_result_table(std::ostream& out, const AblationResult& result, const std::string& protocol) {
  out << "fingerprint,protocol,arm";
  for (const auto& c : kMetricColumns) {
    out << ',' << c;
  }
  out << '\n';
  out.precision(10);
  for (const auto& a : result.arms) {
    out << result.fingerprint << ',' << protocol << ',' << to_string(a.arm);
    for (double v : metric_values(a.median)) {
      out << ',' << v;
    }
    out << '\n';
  }
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string x;
  while (std::getline(ss, x, ',')) {
    f.push_back(x);
  }
  return f;
}

}  // namespace

ResultTable read_run_table(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "table.csv");
  if (!in) {
    throw ConfigError("compare: no table.csv in " + run_dir.string());
  }
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  auto col = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ConfigError("compare: run " + run_dir.string() + " lacks column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t arm_col = col("arm");
  const std::size_t proto_col = col("protocol");
  const std::size_t fp_col = col("fingerprint");
  std::vector<std::size_t> metric_cols;
  for (const auto& c : kMetricColumns) {
    metric_cols.push_back(col(c));
  }
  ResultTable t;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    const auto f = split(line);
    if (f.size() != header.size()) {
      throw ConfigError("compare: malformed row in " + run_dir.string() + ": '" + line + "'");
    }
    t.fingerprint = f[fp_col];
    t.protocol = f[proto_col];
    t.arms.push_back(f[arm_col]);
    std::vector<double> v;
    for (std::size_t c : metric_cols) {
      if (f[c].empty()) {
        throw ConfigError("compare: empty value in column '" + header[c] + "' of " + run_dir.string());
      }
      v.push_back(std::stod(f[c]));
    }
    t.values.push_back(v);
  }
  if (t.arms.empty()) {
    throw ConfigError("compare: run " + run_dir.string() + " has no rows");
  }
  return t;
}

std::vector<ComparisonRow> compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                                        const std::string& reference) {
  if (run_dirs.empty()) {
    throw ConfigError("compare: no runs given");
  }
  std::vector<ResultTable> tables;
  for (const auto& d : run_dirs) {
    tables.push_back(read_run_table(d));
  }
  for (const auto& t : tables) {
    if (t.protocol != tables.front().protocol) {
      throw ConfigError("compare: runs use different evaluation protocols (" + tables.front().protocol + " vs " +
                        t.protocol + ")");
    }
  }
  auto find_arm = [](const ResultTable& t, const std::string& arm) -> const std::vector<double>* {
    const auto it = std::find(t.arms.begin(), t.arms.end(), arm);
    return it == t.arms.end() ? nullptr : &t.values[static_cast<std::size_t>(it - t.arms.begin())];
  };
  int ref_run = -1;
  for (std::size_t i = 0; i < run_dirs.size(); ++i) {
    if (run_dirs[i].string() == reference || run_dirs[i].filename().string() == reference ||
        std::filesystem::path(reference).lexically_normal() == run_dirs[i].lexically_normal()) {
      ref_run = static_cast<int>(i);
      break;
    }
  }
  bool arm_reference = false;
  if (ref_run < 0) {
    arm_reference = std::all_of(tables.begin(), tables.end(), [&](const ResultTable& t) {
      return find_arm(t, reference) != nullptr;
    });
    if (!arm_reference) {
      throw ConfigError("compare: reference '" + reference + "' is neither a given run nor an arm of every run");
    }
  }
  std::vector<ComparisonRow> rows;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto& t = tables[i];
    for (std::size_t a = 0; a < t.arms.size(); ++a) {
      const std::vector<double>* ref =
          arm_reference ? find_arm(t, reference) : find_arm(tables[static_cast<std::size_t>(ref_run)], t.arms[a]);
      if (ref == nullptr) {
        throw ConfigError("compare: reference run lacks arm " + t.arms[a]);
      }
      ComparisonRow row;
      row.run = run_dirs[i].filename().string();
      row.arm = t.arms[a];
      row.values = t.values[a];
      for (std::size_t m = 0; m < row.values.size(); ++m) {
        if (!((*ref)[m] > 0.0)) {
          throw DomainError("compare: reference value for '" + kMetricColumns[m] + "' is not positive");
        }
        row.ratios.push_back(row.values[m] / (*ref)[m]);
        row.mean_ratio += row.ratios.back();
      }
      row.mean_ratio /= static_cast<double>(row.ratios.size());
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "run,arm";
  for (const auto& c : kMetricColumns) {
    out << ',' << c;
  }
  for (const auto& c : kMetricColumns) {
    out << ',' << c << "_ratio";
  }
  out << ",mean_ratio\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.run << ',' << r.arm;
    for (double v : r.values) {
      out << ',' << v;
    }
    for (double v : r.ratios) {
      out << ',' << v;
    }
    out << ',' << r.mean_ratio << '\n';
  }
}

}  // namespace foresight
