#include "foresight/curriculum.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/synth_world.hpp"

namespace foresight {

std::string_view to_string(SamplerKind kind) { return kind == SamplerKind::Tis ? "TIS" : "UNIFORM"; }

namespace {

SamplerKind sampler_from_string(std::string_view s) {
  if (s == "TIS") {
    return SamplerKind::Tis;
  }
  if (s == "UNIFORM") {
    return SamplerKind::Uniform;
  }
  throw ConfigError("unknown sampler '" + std::string(s) + "'");
}

constexpr std::pair<PlanId, std::string_view> kPlanNames[] = {
    {PlanId::FramewiseH1, "FRAMEWISE_H1"},
    {PlanId::ChunkH6, "CHUNK_H6"},
    {PlanId::ChunkH21Cl, "CHUNK_H21_CL"},
    {PlanId::ChunkH21Clef, "CHUNK_H21_CLEF"},
    {PlanId::ChunkH21ClefTis, "CHUNK_H21_CLEF_TIS"},
};

}  // namespace

std::string_view to_string(PlanId plan) {
  for (const auto& [id, name] : kPlanNames) {
    if (id == plan) {
      return name;
    }
  }
  return "?";
}

PlanId plan_id_from_string(std::string_view name) {
  for (const auto& [id, n] : kPlanNames) {
    if (n == name) {
      return id;
    }
  }
  throw ConfigError("unknown curriculum plan '" + std::string(name) + "'");
}

int steps_per_stride(double stride_s) {
  const double steps = stride_s / kControlPeriodS;
  const long rounded = std::lround(steps);
  if (std::abs(steps - static_cast<double>(rounded)) > 1e-9 || rounded < 1) {
    throw ConfigError("stride must be a positive multiple of the 0.25 s control period");
  }
  return static_cast<int>(rounded);
}

void CurriculumStage::validate() const {
  if (horizon < 1) {
    throw ConfigError("stage: horizon must be >= 1");
  }
  if (stride_s < kChunkDurationS) {
    throw ConfigError("stage: stride must be >= the 1 s chunk duration");
  }
  (void)steps_per_stride(stride_s);
  if (train_steps < 1) {
    throw ConfigError("stage: train_steps must be >= 1");
  }
}

void to_json(nlohmann::json& j, const CurriculumStage& s) {
  j = nlohmann::json{{"horizon", s.horizon},
                     {"stride_s", s.stride_s},
                     {"train_steps", s.train_steps},
                     {"sampler", to_string(s.sampler)},
                     {"learning_rate", s.learning_rate}};
}

void from_json(const nlohmann::json& j, CurriculumStage& s) {
  for (const auto& [key, value] : j.items()) {
    if (key != "horizon" && key != "stride_s" && key != "train_steps" && key != "sampler" &&
        key != "learning_rate") {
      throw ConfigError("stage: unknown key '" + key + "'");
    }
  }
  s.horizon = j.at("horizon").get<int>();
  s.stride_s = j.at("stride_s").get<double>();
  s.train_steps = j.at("train_steps").get<int>();
  s.sampler = sampler_from_string(j.value("sampler", std::string("UNIFORM")));
  s.learning_rate = j.value("learning_rate", 0.0);
}

void to_json(nlohmann::json& j, const ScheduleOptions& o) {
  j = nlohmann::json{{"mid_horizon", o.mid_horizon},
                     {"long_horizon", o.long_horizon},
                     {"extended_stride_s", o.extended_stride_s},
                     {"stage_steps", o.stage_steps},
                     {"learning_rate", o.learning_rate}};
}

void from_json(const nlohmann::json& j, ScheduleOptions& o) {
  for (const auto& [key, value] : j.items()) {
    if (key == "mid_horizon") {
      o.mid_horizon = value.get<int>();
    } else if (key == "long_horizon") {
      o.long_horizon = value.get<int>();
    } else if (key == "extended_stride_s") {
      o.extended_stride_s = value.get<double>();
    } else if (key == "stage_steps") {
      o.stage_steps = value.get<std::vector<int>>();
    } else if (key == "learning_rate") {
      o.learning_rate = value.get<double>();
    } else {
      throw ConfigError("curriculum: unknown key '" + key + "'");
    }
  }
}

std::vector<CurriculumStage> stage_schedule(PlanId plan, const ScheduleOptions& opts) {
  if (opts.stage_steps.size() != 4) {
    throw ConfigError("curriculum: stage_steps needs four entries");
  }
  if (opts.mid_horizon < 1 || opts.long_horizon < opts.mid_horizon) {
    throw ConfigError("curriculum: need 1 <= mid_horizon <= long_horizon");
  }
  const double lr = opts.learning_rate;
  const auto& n = opts.stage_steps;
  const CurriculumStage h1{1, 1.0, n[0], SamplerKind::Uniform, lr};
  const CurriculumStage mid{opts.mid_horizon, 1.0, n[1], SamplerKind::Uniform, lr};
  const CurriculumStage lng{opts.long_horizon, 1.0, n[2], SamplerKind::Uniform, lr};
  const CurriculumStage extended{opts.long_horizon, opts.extended_stride_s, n[3], SamplerKind::Uniform, lr};

  std::vector<CurriculumStage> stages;
  switch (plan) {
    case PlanId::FramewiseH1:
      stages = {h1};
      break;
    case PlanId::ChunkH6:
      stages = {h1, mid};
      break;
    case PlanId::ChunkH21Cl:
      stages = {h1, mid, lng};
      break;
    case PlanId::ChunkH21Clef:
      stages = {h1, mid, lng, extended};
      break;
    case PlanId::ChunkH21ClefTis:
      stages = {h1, mid, lng, extended};
      stages.back().sampler = SamplerKind::Tis;
      break;
  }
  for (const auto& s : stages) {
    s.validate();
  }
  return stages;
}

int total_steps(const std::vector<CurriculumStage>& stages) {
  int total = 0;
  for (const auto& s : stages) {
    total += s.train_steps;
  }
  return total;
}

std::vector<CurriculumStage> equalize_budget(std::vector<CurriculumStage> stages, int total) {
  if (stages.empty()) {
    throw ConfigError("equalize_budget: empty plan");
  }
  const int current = total_steps(stages);
  if (current > total) {
    throw ConfigError("equalize_budget: plan already uses " + std::to_string(current) + " steps, budget is " +
                      std::to_string(total));
  }
  stages.back().train_steps += total - current;
  return stages;
}

std::pair<double, double> action_at(const Episode& episode, int step) {
  if (step < 1 || step >= episode.n_steps) {
    throw DomainError("action_at: step " + std::to_string(step) + " has no preceding position");
  }
  const auto k = static_cast<std::size_t>(step);
  return {episode.x[k] - episode.x[k - 1], episode.y[k] - episode.y[k - 1]};
}

SupervisionTargets assign_targets(const Episode& episode, int anchor_step, const CurriculumStage& stage,
                                  int frames_per_chunk) {
  stage.validate();
  const int stride = steps_per_stride(stage.stride_s);
  const int last_needed = anchor_step + stage.horizon * stride;
  if (anchor_step < 0) {
    throw DomainError("assign_targets: negative anchor");
  }
  if (last_needed > episode.n_steps - 1) {
    throw DomainError("assign_targets: episode too short by " + std::to_string(last_needed - (episode.n_steps - 1)) +
                      " control steps (needs step " + std::to_string(last_needed) + ", last is " +
                      std::to_string(episode.n_steps - 1) + ")");
  }
  if (frames_per_chunk < 1) {
    throw ConfigError("assign_targets: frames_per_chunk must be >= 1");
  }
  SupervisionTargets targets;
  targets.anchor_step = anchor_step;
  targets.stage = stage;
  const auto V = static_cast<std::size_t>(episode.n_views);
  const auto d = static_cast<std::size_t>(episode.latent_dim);
  for (int i = 1; i <= stage.horizon; ++i) {
    const int step = anchor_step + i * stride;
    ObsTarget obs;
    obs.chunk_index = i;
    obs.step = step;
    obs.target_time_s = episode.time_of(step);
    obs.latents = Matrix(static_cast<std::size_t>(frames_per_chunk) * V, d);
    for (int f = 0; f < frames_per_chunk; ++f) {
      const int frame_step = step - (frames_per_chunk - 1 - f);
      for (std::size_t v = 0; v < V; ++v) {
        const auto src = episode.latent(frame_step, static_cast<int>(v));
        std::copy(src.begin(), src.end(), obs.latents.row(static_cast<std::size_t>(f) * V + v).begin());
      }
    }
    targets.obs_targets.push_back(std::move(obs));
    const auto bev = episode.bev_latents.row(static_cast<std::size_t>(step));
    targets.bev_targets.push_back({i, step, std::vector<double>(bev.begin(), bev.end())});
  }
  for (int j = 1; j <= stage.horizon * stride; ++j) {
    const int step = anchor_step + j;
    const auto [dx, dy] = action_at(episode, step);
    targets.action_targets.push_back({episode.time_of(step), step, dx, dy});
  }
  return targets;
}

}  // namespace foresight
