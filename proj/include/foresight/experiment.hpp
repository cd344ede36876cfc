#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/curriculum.hpp"
#include "foresight/model.hpp"
#include "foresight/objectives.hpp"
#include "foresight/synth_world.hpp"
#include "foresight/temporal_sampler.hpp"

namespace foresight {

extern const char* const kCodeVersion;

struct EvalProtocol {
  std::uint64_t episode_seed = 9001;  // eval episodes are disjoint from training seeds
  int n_episodes = 4;
  int anchors_per_episode = 6;
  double rollout_horizon_s = 6.0;
  double far_horizon_s = 18.0;
  double latent_aug_sigma = 0.05;

  void validate() const;
  friend bool operator==(const EvalProtocol&, const EvalProtocol&) = default;
};

void to_json(nlohmann::json& j, const EvalProtocol& p);
void from_json(const nlohmann::json& j, EvalProtocol& p);

struct ExperimentPlan {
  std::string plan_id = "full";
  std::vector<PlanId> arms{PlanId::FramewiseH1, PlanId::ChunkH6, PlanId::ChunkH21Cl, PlanId::ChunkH21Clef,
                           PlanId::ChunkH21ClefTis};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  // Desk analogs of the paper's horizons 6 and 21.
  ScheduleOptions schedule{3, 6, 3.0, {300, 300, 450, 450}, 0.02};
  ModelConfig model{};
  WorldConfig world{};
  ImportanceConfig sampler{};
  LossWeights loss{};
  int batch_size = 4;
  int train_episodes = 8;
  double momentum = 0.9;
  double clip_norm = 1.0;
  EvalProtocol eval{};
  int workers = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);

// Named presets: "full" (all five arms) and "framewise_vs_chunk" (H1, the
// mid-horizon arm and the long-horizon curriculum).
ExperimentPlan preset_plan(const std::string& name);

// Equal-budget stage list of one arm.
std::vector<CurriculumStage> arm_schedule(const ExperimentPlan& plan, PlanId arm);
// Longest horizon the arm trains on; its rollout window.
int arm_window(const ExperimentPlan& plan, PlanId arm);

struct ArmMetrics {
  double lat_ade = 0.0;
  double long_ade = 0.0;
  double lat_fde = 0.0;
  double long_fde = 0.0;
  double rollout_error = 0.0;  // mean latent error over the closed-loop rollout
  double event_error = 0.0;    // far rollout restricted to event steps
  double far_obs_error = 0.0;  // latent error at the far horizon

  friend bool operator==(const ArmMetrics&, const ArmMetrics&) = default;
};

extern const std::vector<std::string> kMetricColumns;
std::vector<double> metric_values(const ArmMetrics& m);

struct DriftRow {
  std::uint64_t seed = 0;
  int offset_step = 0;
  double sink_on = 0.0;
  double sink_off = 0.0;
  double augmented = 0.0;  // training-mode rollout with latent augmentation
};

struct ArmResult {
  PlanId arm = PlanId::FramewiseH1;
  std::vector<std::uint64_t> seeds;
  std::vector<ArmMetrics> per_seed;
  ArmMetrics median;
  std::vector<DriftRow> drift;
};

struct AblationResult {
  std::string fingerprint;
  std::vector<ArmResult> arms;
  const ArmResult& arm(PlanId id) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains and evaluates every arm. With a non-empty output directory the
// results are persisted (plan.json, <arm>/metrics.csv, <arm>/drift.csv,
// <arm>/loss.csv, checkpoints/, table.csv) and stage checkpoints are reused
// when their key matches.
AblationResult run_ablation(const ExperimentPlan& plan, const std::filesystem::path& output_dir = {},
                            const ProgressFn& progress = {});

// Fingerprint of the plan: FNV-1a over the canonical plan JSON and the code
// version.
std::string plan_fingerprint(const ExperimentPlan& plan);
// Fingerprint of the evaluation protocol only; runs are comparable iff equal.
std::string protocol_fingerprint(const ExperimentPlan& plan);

// Trained model and evaluation helpers, exposed for tests and the CLI.
struct TrainingData {
  std::vector<Episode> episodes;
};
TrainingData make_training_data(const ExperimentPlan& plan, std::uint64_t seed);
std::vector<Episode> make_eval_episodes(const ExperimentPlan& plan);
std::vector<int> eval_anchors(const Episode& ep, const ExperimentPlan& plan);

// Trains one stage in place. Each stage draws from its own generator so a
// stage result depends only on its inputs, which makes checkpoint reuse exact.
void train_stage(Model& model, const CurriculumStage& stage, int stage_index, const TrainingData& data,
                 const ExperimentPlan& plan, std::uint64_t seed, std::ostream* loss_csv = nullptr);

ArmMetrics evaluate_arm(const Model& model, const ExperimentPlan& plan, PlanId arm,
                        const std::vector<Episode>& eval_episodes, std::vector<DriftRow>* drift = nullptr,
                        std::uint64_t seed = 0);

// Finite-difference spot check of a few gradient coordinates. Returns the
// worst relative error.
double gradient_spot_check(const Model& model, const TrainingSample& sample, const LossWeights& w, int n_coords,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Result tables

struct ResultTable {
  std::string fingerprint;
  std::string protocol;
  std::vector<std::string> arms;
  std::vector<std::vector<double>> values;  // [arm][metric], kMetricColumns order
};

void write_result_table(std::ostream& out, const AblationResult& result, const std::string& protocol);
// Reads table.csv from a run directory (with the protocol from plan.json).
ResultTable read_run_table(const std::filesystem::path& run_dir);

struct ComparisonRow {
  std::string run;
  std::string arm;
  std::vector<double> values;
  std::vector<double> ratios;  // value / reference value per metric
  double mean_ratio = 0.0;
};

// `reference` names either one of the run directories (rows are compared arm
// by arm against that run) or an arm (rows are compared against that arm of
// the same run). Throws ConfigError on protocol mismatch or missing columns.
std::vector<ComparisonRow> compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                                        const std::string& reference);
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

}  // namespace foresight
