#include <doctest.h>

#include <nlohmann/json.hpp>

#include "foresight/curriculum.hpp"
#include "foresight/errors.hpp"
#include "foresight/synth_world.hpp"

using namespace foresight;

namespace {

Episode short_episode(double seconds) {
  WorldConfig wc;
  wc.episode_len_s = seconds;
  wc.event_script = {{2.0, 2.0, EventKind::Brake, 2.0}};
  return generate_episode(4, wc);
}

}  // namespace

TEST_CASE("plan schedules") {
  const ScheduleOptions o;  // paper horizons 6 and 21
  const auto clef = stage_schedule(PlanId::ChunkH21Clef, o);
  REQUIRE(clef.size() == 4);
  const int H[] = {1, 6, 21, 21};
  const double S[] = {1.0, 1.0, 1.0, 3.0};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(clef[i].horizon == H[i]);
    CHECK(clef[i].stride_s == S[i]);
    CHECK(clef[i].train_steps == o.stage_steps[i]);
    CHECK(clef[i].sampler == SamplerKind::Uniform);
  }
  const auto h1 = stage_schedule(PlanId::FramewiseH1, o);
  REQUIRE(h1.size() == 1);
  CHECK(h1[0].horizon == 1);
  CHECK(h1[0].stride_s == 1.0);

  auto tis = stage_schedule(PlanId::ChunkH21ClefTis, o);
  CHECK(tis.back().sampler == SamplerKind::Tis);
  tis.back().sampler = SamplerKind::Uniform;
  CHECK(tis == clef);

  CHECK(stage_schedule(PlanId::ChunkH6, o).size() == 2);
  CHECK(stage_schedule(PlanId::ChunkH21Cl, o).back().stride_s == 1.0);

  for (auto plan : {PlanId::FramewiseH1, PlanId::ChunkH6, PlanId::ChunkH21Cl, PlanId::ChunkH21Clef,
                    PlanId::ChunkH21ClefTis}) {
    const auto st = stage_schedule(plan, o);
    for (std::size_t i = 1; i < st.size(); ++i) {
      CHECK(st[i].horizon >= st[i - 1].horizon);
      CHECK(st[i].stride_s >= st[i - 1].stride_s);
    }
    CHECK(plan_id_from_string(to_string(plan)) == plan);
  }
  CHECK_THROWS_AS(plan_id_from_string("CHUNK_H99"), ConfigError);
}

TEST_CASE("equal budgets") {
  const ScheduleOptions o{3, 6, 3.0, {10, 20, 30, 40}, 0.0};
  const auto a = equalize_budget(stage_schedule(PlanId::FramewiseH1, o), 100);
  CHECK(total_steps(a) == 100);
  CHECK(a.back().train_steps == 100);
  const auto b = equalize_budget(stage_schedule(PlanId::ChunkH6, o), 100);
  CHECK(b.front().train_steps == 10);
  CHECK(b.back().train_steps == 90);
  CHECK_THROWS_AS(equalize_budget(stage_schedule(PlanId::ChunkH21Clef, o), 99), ConfigError);
}

TEST_CASE("stage validation") {
  CurriculumStage s;
  s.horizon = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = CurriculumStage{};
  s.stride_s = 0.5;  // below one chunk
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = CurriculumStage{};
  s.train_steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(steps_per_stride(1.0) == 4);
  CHECK(steps_per_stride(3.0) == 12);
}

TEST_CASE("target assignment: unit stride") {
  const auto ep = short_episode(10.0);
  const CurriculumStage st{3, 1.0, 1, SamplerKind::Uniform, 0.0};
  const auto t = assign_targets(ep, 0, st);
  REQUIRE(t.obs_targets.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(t.obs_targets[static_cast<std::size_t>(i)].target_time_s == 1.0 * (i + 1));
    CHECK(t.bev_targets[static_cast<std::size_t>(i)].step == 4 * (i + 1));
  }
  REQUIRE(t.action_targets.size() == 12);
  for (int j = 0; j < 12; ++j) {
    CHECK(t.action_targets[static_cast<std::size_t>(j)].control_step_time_s == doctest::Approx(0.25 * (j + 1)));
  }
  // Frames of a target chunk end at the target step, oldest first.
  const auto& o = t.obs_targets[1];
  for (int f = 0; f < 4; ++f) {
    for (int v = 0; v < ep.n_views; ++v) {
      const auto want = ep.latent(o.step - 3 + f, v);
      const auto got = o.latents.row(static_cast<std::size_t>(f * ep.n_views + v));
      CHECK(std::equal(want.begin(), want.end(), got.begin()));
    }
  }
}

TEST_CASE("target assignment: extended stride keeps dense actions") {
  const auto ep = short_episode(10.0);
  const CurriculumStage st{2, 3.0, 1, SamplerKind::Uniform, 0.0};
  const auto t = assign_targets(ep, 0, st);
  REQUIRE(t.obs_targets.size() == 2);
  CHECK(t.obs_targets[0].target_time_s == 3.0);
  CHECK(t.obs_targets[1].target_time_s == 6.0);
  REQUIRE(t.action_targets.size() == 24);
  CHECK(t.action_targets.front().control_step_time_s == 0.25);
  CHECK(t.action_targets.back().control_step_time_s == 6.0);
  // Actions are per-step displacements.
  const auto& a = t.action_targets[5];
  CHECK(a.dx == ep.x[6] - ep.x[5]);
  CHECK(a.dy == ep.y[6] - ep.y[5]);
}

TEST_CASE("target assignment at the episode boundary") {
  const auto ep = short_episode(10.0);
  const CurriculumStage st{1, 1.0, 1, SamplerKind::Uniform, 0.0};
  const int last = ep.n_steps - 1;
  CHECK(assign_targets(ep, last - 4, st).obs_targets.size() == 1);
  CHECK_THROWS_WITH_AS(assign_targets(ep, last - 3, st), doctest::Contains("too short by 1"), DomainError);
  CHECK_THROWS_AS(action_at(ep, 0), DomainError);
}

TEST_CASE("stage and schedule json") {
  const CurriculumStage s{6, 3.0, 120, SamplerKind::Tis, 0.01};
  nlohmann::json j = s;
  CurriculumStage back;
  from_json(j, back);
  CHECK(back == s);
  j["extra"] = 1;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);

  ScheduleOptions o;
  from_json(nlohmann::json{{"mid_horizon", 2}, {"stage_steps", {1, 2, 3, 4}}}, o);
  CHECK(o.mid_horizon == 2);
  CHECK(o.stage_steps[3] == 4);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"steps", 1}}, o), ConfigError);
  o.stage_steps = {1, 2};
  CHECK_THROWS_AS(stage_schedule(PlanId::ChunkH6, o), ConfigError);
}
