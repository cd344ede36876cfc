#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/matrix.hpp"

namespace foresight {

struct Episode;

enum class SamplerKind : std::uint8_t { Uniform, Tis };
std::string_view to_string(SamplerKind kind);

enum class PlanId : std::uint8_t { FramewiseH1, ChunkH6, ChunkH21Cl, ChunkH21Clef, ChunkH21ClefTis };
std::string_view to_string(PlanId plan);
PlanId plan_id_from_string(std::string_view name);

constexpr double kChunkDurationS = 1.0;
constexpr double kControlPeriodS = 0.25;

struct CurriculumStage {
  int horizon = 1;          // chunks
  double stride_s = 1.0;    // seconds between neighboring chunks
  int train_steps = 1;
  SamplerKind sampler = SamplerKind::Uniform;
  double learning_rate = 0.0;  // 0 means "use the trainer default"

  void validate() const;
  friend bool operator==(const CurriculumStage&, const CurriculumStage&) = default;
};

void to_json(nlohmann::json& j, const CurriculumStage& s);
void from_json(const nlohmann::json& j, CurriculumStage& s);

struct ScheduleOptions {
  // Horizon analogs for the paper's H = 6 and H = 21.
  int mid_horizon = 6;
  int long_horizon = 21;
  double extended_stride_s = 3.0;
  // Steps for stages 1..4 (H=1, H=mid, H=long, extended stride).
  std::vector<int> stage_steps{2000, 4000, 4000, 4000};
  double learning_rate = 0.0;
};

void to_json(nlohmann::json& j, const ScheduleOptions& o);
void from_json(const nlohmann::json& j, ScheduleOptions& o);

std::vector<CurriculumStage> stage_schedule(PlanId plan, const ScheduleOptions& opts = {});

// Extends the final stage so the plan spends exactly total_steps. Throws if the
// plan already exceeds it.
std::vector<CurriculumStage> equalize_budget(std::vector<CurriculumStage> stages, int total_steps);
int total_steps(const std::vector<CurriculumStage>& stages);

struct ObsTarget {
  int chunk_index = 0;  // 1..H
  double target_time_s = 0.0;
  int step = 0;
  // Frames of the target chunk: row (f * n_views + v), f = 0 is the oldest.
  Matrix latents;
};

struct ActionTarget {
  double control_step_time_s = 0.0;
  int step = 0;
  double dx = 0.0;
  double dy = 0.0;
};

struct BevTarget {
  int chunk_index = 0;
  int step = 0;
  std::vector<double> latent;
};

struct SupervisionTargets {
  int anchor_step = 0;
  CurriculumStage stage;
  std::vector<ObsTarget> obs_targets;
  std::vector<ActionTarget> action_targets;
  std::vector<BevTarget> bev_targets;
};

int steps_per_stride(double stride_s);

// Observation and BEV targets at anchor + i*s (i = 1..H); action targets at
// every control step anchor + j*0.25 s up to anchor + H*s, unstrided.
SupervisionTargets assign_targets(const Episode& episode, int anchor_step, const CurriculumStage& stage,
                                  int frames_per_chunk = 4);

// Ego displacement over control step k (position k minus position k-1).
std::pair<double, double> action_at(const Episode& episode, int step);

}  // namespace foresight
