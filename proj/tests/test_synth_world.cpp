#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/rng.hpp"
#include "foresight/synth_world.hpp"

using namespace foresight;

namespace {

WorldConfig brake_world() {
  WorldConfig c;
  c.episode_len_s = 20.0;
  c.event_script = {{10.0, 0.75, EventKind::Brake, 3.0}};
  return c;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("episodes are deterministic per seed") {
  const auto cfg = brake_world();
  CHECK(generate_episode(7, cfg) == generate_episode(7, cfg));
  CHECK_FALSE(generate_episode(7, cfg).obs_latents == generate_episode(8, cfg).obs_latents);
}

TEST_CASE("scripted brake shows up exactly in a_x") {
  const auto ep = generate_episode(1, brake_world());
  for (int k = 0; k < ep.n_steps; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    CHECK(ep.a_x[ku] == ((k >= 40 && k <= 42) ? -3.0 : 0.0));
    CHECK(ep.a_y[ku] == 0.0);
  }
  const auto seg = event_segments(ep);
  REQUIRE(seg.size() == 1);
  CHECK(seg[0] == EventSegment{40, 43, EventKind::Brake});
}

TEST_CASE("empty script is straight cruising") {
  WorldConfig c;
  c.episode_len_s = 8.0;
  const auto ep = generate_episode(3, c);
  CHECK(event_segments(ep).empty());
  for (int k = 0; k < ep.n_steps; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    CHECK(ep.a_x[ku] == 0.0);
    CHECK(ep.a_y[ku] == 0.0);
    CHECK(ep.y[ku] == 0.0);
    CHECK(ep.x[ku] == doctest::Approx(c.initial_speed * k * 0.25).epsilon(1e-12));
  }
}

TEST_CASE("accelerations are second differences of positions") {
  WorldConfig c;
  c.episode_len_s = 60.0;
  c.event_script = random_event_script(11, c.episode_len_s);
  REQUIRE(!c.event_script.empty());
  const auto ep = generate_episode(11, c);
  const double dt = c.dt();
  for (int k = 1; k + 1 < ep.n_steps; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    CHECK(std::fabs((ep.x[ku + 1] - 2 * ep.x[ku] + ep.x[ku - 1]) / (dt * dt) - ep.a_x[ku]) <= 1e-9);
    CHECK(std::fabs((ep.y[ku + 1] - 2 * ep.y[ku] + ep.y[ku - 1]) / (dt * dt) - ep.a_y[ku]) <= 1e-9);
  }
  const auto seg = event_segments(ep);
  for (std::size_t i = 1; i < seg.size(); ++i) CHECK(seg[i].start_step >= seg[i - 1].end_step);
  // Braking spans peak at the scripted magnitude.
  for (const auto& e : c.event_script) {
    if (e.kind != EventKind::Brake) continue;
    const int b = static_cast<int>(std::lround(e.start_s * 4));
    double peak = 0.0;
    for (int k = b; k < b + static_cast<int>(std::lround(e.duration_s * 4)); ++k) {
      peak = std::max(peak, std::hypot(ep.a_x[static_cast<std::size_t>(k)], ep.a_y[static_cast<std::size_t>(k)]));
    }
    CHECK(peak == doctest::Approx(std::fabs(e.magnitude)).epsilon(1e-9));
  }
}

TEST_CASE("swerve and turn") {
  WorldConfig c;
  c.episode_len_s = 12.0;
  c.event_script = {{2.0, 1.0, EventKind::Swerve, 2.0}, {6.0, 2.0, EventKind::Turn, 0.1}};
  const auto ep = generate_episode(2, c);
  CHECK(ep.a_y[8] == doctest::Approx(2.0));
  // Second half pushes back; heading has rotated, so check magnitude and sign.
  CHECK(ep.a_y[11] < 0.0);
  CHECK(std::hypot(ep.a_x[11], ep.a_y[11]) == doctest::Approx(2.0).epsilon(1e-12));
  // A lane change ends with the lateral velocity it started with.
  CHECK(std::fabs(ep.y[23] - ep.y[22] - (ep.y[13] - ep.y[12])) < 1e-12);
  // Constant yaw rate keeps the speed.
  const double v0 = std::hypot(ep.x[24] - ep.x[23], ep.y[24] - ep.y[23]);
  const double v1 = std::hypot(ep.x[33] - ep.x[32], ep.y[33] - ep.y[32]);
  CHECK(v1 == doctest::Approx(v0).epsilon(1e-12));
}

TEST_CASE("world validation") {
  WorldConfig c;
  c.event_script = {{2.0, 2.0, EventKind::Brake, 1.0}, {3.0, 1.0, EventKind::Swerve, 1.0}};
  CHECK_THROWS_AS(generate_episode(1, c), ConfigError);
  c.event_script = {{59.5, 2.0, EventKind::Brake, 1.0}};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = WorldConfig{};
  c.frame_dim = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = WorldConfig{};
  c.event_script = {{1.0, 10.0, EventKind::Brake, 5.0}};  // would reverse
  CHECK_THROWS_AS(generate_episode(1, c), ConfigError);
}

TEST_CASE("decoder is an isometry with an exact left inverse") {
  const FixedDecoder dec(16, 64);
  const Matrix& M = dec.matrix();
  // M^T M == I
  for (std::size_t a = 0; a < 16; ++a) {
    for (std::size_t b = 0; b < 16; ++b) {
      double s = 0.0;
      for (std::size_t r = 0; r < 64; ++r) s += M(r, a) * M(r, b);
      CHECK(std::fabs(s - (a == b ? 1.0 : 0.0)) <= 1e-10);
    }
  }
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_vec(16, rng);
    const auto f = decode_latent(z, 64);
    double nz = 0.0, nf = 0.0;
    for (double x : z) nz += x * x;
    for (double x : f) nf += x * x;
    CHECK(std::sqrt(nf) == doctest::Approx(std::sqrt(nz)).epsilon(1e-12));
    const auto back = encode_observation(f, 16);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::fabs(back[i] - z[i]) <= 1e-10);
  }
  const auto zero = decode_latent(std::vector<double>(16, 0.0), 64);
  for (double x : zero) CHECK(x == 0.0);

  // Linearity of encode, and decode∘encode fixes the range.
  const auto f1 = random_vec(64, rng);
  const auto f2 = random_vec(64, rng);
  std::vector<double> sum(64);
  for (std::size_t i = 0; i < 64; ++i) sum[i] = f1[i] + f2[i];
  const auto e1 = encode_observation(f1, 16);
  const auto e2 = encode_observation(f2, 16);
  const auto es = encode_observation(sum, 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(es[i] == doctest::Approx(e1[i] + e2[i]).epsilon(1e-12));
  const auto proj = decode_latent(e1, 64);
  const auto proj2 = decode_latent(encode_observation(proj, 16), 64);
  for (std::size_t i = 0; i < 64; ++i) CHECK(std::fabs(proj[i] - proj2[i]) <= 1e-10);

  CHECK_THROWS_AS(dec.decode(std::vector<double>(3)), PreconditionError);
}

TEST_CASE("episode frames are decoded latents") {
  const auto ep = generate_episode(5, brake_world());
  for (int k : {0, 41, ep.n_steps - 1}) {
    for (int v = 0; v < ep.n_views; ++v) {
      const auto f = decode_latent(ep.latent(k, v), ep.frame_dim);
      const auto row = ep.frames.row(static_cast<std::size_t>(k * ep.n_views + v));
      CHECK(std::equal(f.begin(), f.end(), row.begin()));
    }
  }
}

TEST_CASE("binary container, csv and json") {
  const auto ep = generate_episode(9, brake_world());
  std::stringstream buf;
  write_episode(buf, ep);
  CHECK(read_episode(buf) == ep);
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_episode(bad), RuntimeFailure);

  std::ostringstream csv;
  write_episode_csv(csv, ep);
  CHECK(csv.str().rfind("step,t,x,y,a_x,a_y,event\n", 0) == 0);

  const auto cfg = brake_world();
  nlohmann::json j = cfg;
  WorldConfig back;
  from_json(j, back);
  CHECK(generate_episode(1, back) == generate_episode(1, cfg));
  j["weather"] = "rain";
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  CHECK_THROWS_AS(event_kind_from_string("DRIFT"), ConfigError);
}
