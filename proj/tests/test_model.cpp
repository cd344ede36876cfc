#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/model.hpp"

using namespace foresight;

namespace {

ModelConfig micro(int layers = 2) {
  ModelConfig c;
  c.d_model = 8;
  c.ff_dim = 16;
  c.n_layers = layers;
  c.head_init_scale = 1.0;
  c.seed = 4;
  return c;
}

const Episode& episode() {
  static const Episode ep = [] {
    WorldConfig wc;
    wc.episode_len_s = 30.0;
    wc.event_script = random_event_script(8, wc.episode_len_s);
    return generate_episode(8, wc);
  }();
  return ep;
}

Prompt three_chunks(const ModelConfig& c, int end = 20) {
  return Prompt{{chunk_from_episode(episode(), end - 8, c, 1.0), chunk_from_episode(episode(), end - 4, c, 1.0),
                 chunk_from_episode(episode(), end, c, 1.0)}};
}

double max_diff(const Predictions& a, const Predictions& b) {
  return std::max({max_abs_difference(a.obs, b.obs), max_abs_difference(a.actions, b.actions),
                   max_abs_difference(a.bev, b.bev)});
}

}  // namespace

TEST_CASE("parameter count follows the layer shapes") {
  for (int layers : {1, 2, 4}) {
    ModelConfig c;
    c.n_layers = layers;
    const std::size_t d = 32, ff = 64, td = 16, bev = 16, acts = 24;
    const std::size_t embeddings = (4 + 8 + (4 + 28) + 9) * d;
    const std::size_t adapters = 2 * d + (td * d + d) + (2 * d + d);
    const std::size_t layer = 4 * d + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
    const std::size_t heads = 2 * d + (d * td + td) + (4 * td) * (4 * td) + (d * acts + acts) + 4 + (d * bev + bev) +
                              3 * 16 * bev;
    CHECK(init_model(c).parameter_count() == embeddings + adapters + layers * layer + heads);
  }
}

TEST_CASE("initialization is deterministic and validated") {
  CHECK(init_model(micro()).flat_parameters() == init_model(micro()).flat_parameters());
  auto other = micro();
  other.seed = 5;
  CHECK(init_model(micro()).flat_parameters() != init_model(other).flat_parameters());
  auto odd = micro();
  odd.n_heads = 3;
  CHECK_THROWS_AS(init_model(odd), ConfigError);

  nlohmann::json j = micro();
  ModelConfig back;
  from_json(j, back);
  CHECK(init_model(back).flat_parameters() == init_model(micro()).flat_parameters());
}

TEST_CASE("output shapes and zero adapters") {
  const auto c = micro();
  Model m = init_model(c);
  const auto stage = CurriculumStage{3, 1.0, 1, SamplerKind::Uniform, 0.0};
  const auto s = make_training_sample(episode(), 12, stage, c);
  const auto p = forward(m, s.prompt);
  CHECK(p.obs.rows() == 3u * 4 * 3);
  CHECK(p.obs.cols() == 16u);
  CHECK(p.actions.rows() == 12u);
  CHECK(p.actions.cols() == 2u);
  CHECK(p.bev.rows() == 3u);
  CHECK(s.obs_target.rows() == p.obs.rows());
  CHECK(s.action_target.rows() == p.actions.rows());
  CHECK(s.bev_target.rows() == p.bev.rows());

  m.zero_output_adapters();
  const auto z = forward(m, s.prompt);
  for (const auto* mat : {&z.obs, &z.actions, &z.bev}) {
    for (double x : mat->values()) CHECK(x == 0.0);
  }
}

TEST_CASE("dense token masks reproduce the block-sparse forward") {
  const auto c = micro(3);
  const Model m = init_model(c);
  const auto prompt = three_chunks(c);
  const auto s = m.structure(3);
  std::vector<TokenMask> tokens;
  for (const auto& mask : s->masks) tokens.push_back(expand_block_mask(mask, s->grid));
  const auto sparse = forward(m, prompt);
  const auto dense = forward_dense(m, prompt, tokens);
  CHECK(max_relative_difference(sparse.obs, dense.obs) <= 1e-6);
  CHECK(max_relative_difference(sparse.actions, dense.actions) <= 1e-6);
  CHECK(max_relative_difference(sparse.bev, dense.bev) <= 1e-6);
  CHECK(max_diff(forward(m, prompt, s->grid, s->masks), sparse) == 0.0);

  const auto other = m.structure(2);
  CHECK_THROWS_AS(forward(m, prompt, other->grid, other->masks), PreconditionError);
}

TEST_CASE("later chunks are invisible to earlier outputs") {
  const auto c = micro();
  const Model m = init_model(c);
  auto prompt = three_chunks(c);
  const auto base = forward(m, prompt);
  for (double& x : prompt.chunks[2].obs.values()) x += 5.0;
  for (double& x : prompt.chunks[2].actions.values()) x -= 1.0;
  const auto moved = forward(m, prompt);
  const std::size_t obs_rows = 2u * 4 * 3;
  for (std::size_t r = 0; r < obs_rows; ++r) {
    for (std::size_t j = 0; j < base.obs.cols(); ++j) CHECK(base.obs(r, j) == moved.obs(r, j));
  }
  for (std::size_t r = 0; r < 8; ++r) CHECK(base.actions(r, 0) == moved.actions(r, 0));
  CHECK(base.bev(1, 0) == moved.bev(1, 0));
  CHECK(base.bev(2, 0) != moved.bev(2, 0));
}

TEST_CASE("gradients match finite differences on three layers") {
  const auto c = micro(3);
  const Model m = init_model(c);
  const auto s = make_training_sample(episode(), 16, CurriculumStage{2, 1.0, 1, SamplerKind::Uniform, 0.0}, c);
  const LossWeights w;
  const auto grad = flat_gradient(m, s, w);
  Model probe = m;
  const double err = finite_diff_check(
      [&](std::span<const double> x) {
        probe.set_flat_parameters(x);
        return sample_loss(probe, s, w).total;
      },
      m.flat_parameters(), grad, 1e-6);
  CHECK(err <= 1e-4);
}

TEST_CASE("training steps") {
  const auto c = micro();
  const auto s = make_training_sample(episode(), 30, CurriculumStage{2, 1.0, 1, SamplerKind::Uniform, 0.0}, c, "one");
  const LossWeights w;

  Model frozen = init_model(c);
  Optimizer o0;
  const auto before = frozen.flat_parameters();
  train_step(frozen, o0, {s}, w, 0.0);
  CHECK(frozen.flat_parameters() == before);

  // Overfitting one sample: the loss falls across every 50-step window.
  Model m = init_model(c);
  Optimizer opt;
  std::vector<double> loss;
  for (int i = 0; i < 200; ++i) loss.push_back(train_step(m, opt, {s}, w, 0.005).total);
  for (std::size_t i = 0; i + 50 < loss.size(); ++i) CHECK(loss[i + 50] < loss[i]);

  // Same seed, same updates.
  Model again = init_model(c);
  Optimizer opt2;
  for (int i = 0; i < 200; ++i) train_step(again, opt2, {s}, w, 0.005);
  CHECK(again.flat_parameters() == m.flat_parameters());

  auto bad = s;
  bad.obs_target(0, 0) = std::nan("");
  bad.id = "poisoned";
  CHECK_THROWS_WITH_AS(train_step(m, opt, {bad}, w, 0.01), doctest::Contains("poisoned"), RuntimeFailure);
}

TEST_CASE("rollout matches teacher forcing and copies with identity heads") {
  const auto c = micro();
  const Model m = init_model(c);
  const std::vector<ChunkInput> ctx{chunk_from_episode(episode(), 16, c, 1.0), chunk_from_episode(episode(), 20, c, 1.0)};
  RolloutOptions ro;
  ro.horizon_s = 6.0;
  const auto trace = closed_loop_rollout(m, ctx, 20, ro);
  CHECK(trace.latents.size() == 24u);
  CHECK(trace.actions.rows() == 24u);
  CHECK(trace.steps.front() == 21);
  CHECK(trace.steps.back() == 44);
  const auto tf = forward(m, Prompt{ctx});
  const auto& first = trace.chunk_predictions.front();
  for (std::size_t r = 0; r < first.obs.rows(); ++r) {
    for (std::size_t j = 0; j < first.obs.cols(); ++j) {
      CHECK(std::fabs(first.obs(r, j) - tf.obs(tf.obs.rows() - first.obs.rows() + r, j)) <= 1e-10);
    }
  }

  const auto copier = make_copy_last_chunk_model(c);
  const auto ct = closed_loop_rollout(copier, ctx, 20, ro);
  for (std::size_t i = 0; i < ct.latents.size(); ++i) {
    for (std::size_t v = 0; v < 3; ++v) {
      const auto ref = ctx.back().obs.row((i % 4) * 3 + v);
      for (std::size_t j = 0; j < 16; ++j) CHECK(std::fabs(ct.latents[i](v, j) - ref[j]) <= 1e-10);
    }
  }

  ro.horizon_s = 2.5;
  CHECK_THROWS_AS(closed_loop_rollout(m, ctx, 20, ro), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const Model m = init_model(micro());
  std::stringstream buf;
  save_checkpoint(buf, m);
  const Model back = load_checkpoint(buf);
  CHECK(back.flat_parameters() == m.flat_parameters());
  CHECK(max_diff(forward(back, three_chunks(micro())), forward(m, three_chunks(micro()))) == 0.0);
  std::stringstream junk("FSCKxxxx");
  CHECK_THROWS(load_checkpoint(junk));
}
