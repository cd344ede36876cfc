#include <doctest.h>

#include <cmath>
#include <sstream>

#include "foresight/errors.hpp"
#include "foresight/metrics.hpp"
#include "foresight/rng.hpp"

using namespace foresight;

namespace {

CcesTable two_method_table() {
  CcesTable t;
  t.methods = {"ref", "b"};
  t.metrics = {"lane", "jerk", "progress", "ttc", "collision"};
  t.category = {CcesCategory::Compliance, CcesCategory::Comfort, CcesCategory::Efficiency, CcesCategory::Safety,
                CcesCategory::Safety};
  t.fail_rate = {{0.10, 0.20, 0.05, 0.04, 0.01}, {0.08, 0.30, 0.05, 0.02, 0.02}};
  t.reference = "ref";
  return t;
}

}  // namespace

TEST_CASE("ade/fde basics") {
  TrajectoryPair same;
  for (int k = 0; k < 5; ++k) same.gt.push_back({1.0 * k, 0.0});
  same.pred = same.gt;
  const auto z = ade_fde(same);
  CHECK(z.lat_ade == 0.0);
  CHECK(z.long_fde == 0.0);

  TrajectoryPair off = same;
  for (auto& p : off.pred) p.y += 0.5;
  const auto e = ade_fde(off);
  CHECK(e.lat_ade == 0.5);
  CHECK(e.lat_fde == 0.5);
  CHECK(e.long_ade == 0.0);
  CHECK(e.long_fde == 0.0);

  off.pred.pop_back();
  CHECK_THROWS_AS(ade_fde(off), PreconditionError);
  CHECK_THROWS_AS(ade_fde(TrajectoryPair{}), PreconditionError);
}

TEST_CASE("ade/fde against a per-step projection oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    TrajectoryPair p;
    double x = 0.0, y = 0.0, h = rng.normal();
    for (int k = 0; k < 8; ++k) {
      p.gt.push_back({x, y});
      p.pred.push_back({x + rng.normal(), y + rng.normal()});
      h += 0.2 * rng.normal();
      x += 2.0 * std::cos(h);
      y += 2.0 * std::sin(h);
    }
    double lat = 0.0, lon = 0.0, lat_last = 0.0, lon_last = 0.0, worst = 0.0;
    for (std::size_t k = 0; k < 8; ++k) {
      const std::size_t a = k < 7 ? k : 6;
      const double th = std::atan2(p.gt[a + 1].y - p.gt[a].y, p.gt[a + 1].x - p.gt[a].x);
      const double ex = p.pred[k].x - p.gt[k].x;
      const double ey = p.pred[k].y - p.gt[k].y;
      lon_last = std::fabs(std::cos(th) * ex + std::sin(th) * ey);
      lat_last = std::fabs(-std::sin(th) * ex + std::cos(th) * ey);
      lon += lon_last;
      lat += lat_last;
      worst = std::max(worst, lat_last);
    }
    const auto r = ade_fde(p);
    CHECK(std::fabs(r.lat_ade - lat / 8) <= 1e-12);
    CHECK(std::fabs(r.long_ade - lon / 8) <= 1e-12);
    CHECK(std::fabs(r.lat_fde - lat_last) <= 1e-12);
    CHECK(std::fabs(r.long_fde - lon_last) <= 1e-12);
    CHECK(r.lat_ade <= worst);
  }
}

TEST_CASE("stationary ground truth keeps the previous heading") {
  TrajectoryPair p;
  p.gt = {{0, 0}, {0, 1}, {0, 1}, {0, 1}};
  p.pred = {{0, 0}, {0, 1}, {0.3, 1}, {0.3, 1}};
  const auto r = ade_fde(p);
  // Heading is +y throughout, so an x offset is lateral.
  CHECK(r.lat_fde == doctest::Approx(0.3));
  CHECK(r.long_fde == 0.0);
}

TEST_CASE("cces reference row and published totals") {
  const auto scores = cces_aggregate(two_method_table());
  REQUIRE(scores.size() == 2);
  for (double c : scores[0].category) CHECK(std::fabs(c - 1.0) <= 1e-12);
  CHECK(std::fabs(scores[0].total - 4.0) <= 1e-12);
  CHECK(scores[1].category[0] == doctest::Approx(0.8));
  CHECK(scores[1].category[1] == doctest::Approx(1.5));
  CHECK(scores[1].category[2] == doctest::Approx(1.0));
  CHECK(scores[1].category[3] == doctest::Approx((0.5 + 2.0) / 2));

  CHECK(std::round(cces_total({0.9756, 0.9880, 0.9833, 0.9927}) * 1e4) / 1e4 == 3.9396);
  CHECK(std::round(cces_total({0.9533, 1.0416, 1.0094, 0.9481}) * 1e4) / 1e4 == 3.9524);
}

TEST_CASE("cces scale invariance and errors") {
  auto t = two_method_table();
  const auto base = cces_aggregate(t);
  for (auto& row : t.fail_rate) row[3] *= 7.5;
  const auto scaled = cces_aggregate(t);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(scaled[i].category[c] == doctest::Approx(base[i].category[c]));
  }
  t.fail_rate[0][2] = 0.0;
  CHECK_THROWS_WITH_AS(cces_aggregate(t), doctest::Contains("progress"), DomainError);
  t = two_method_table();
  t.reference = "nobody";
  CHECK_THROWS_AS(cces_aggregate(t), ConfigError);
  t = two_method_table();
  t.category.pop_back();
  CHECK_THROWS_AS(cces_aggregate(t), PreconditionError);
}

TEST_CASE("cces csv round trip") {
  std::istringstream in(
      "method,metric,category,fail_rate\n"
      "A,lane,compliance,0.1\nA,jerk,comfort,0.2\nA,progress,efficiency,0.4\nA,ttc,safety,0.05\n"
      "B,lane,compliance,0.05\nB,jerk,comfort,0.2\nB,progress,efficiency,0.8\nB,ttc,safety,0.05\n");
  const auto t = read_cces_csv(in, "A");
  const auto s = cces_aggregate(t);
  CHECK(s[1].total == doctest::Approx(0.5 + 1.0 + 2.0 + 1.0));
  std::ostringstream out;
  write_cces_csv(out, s);
  CHECK(out.str().rfind("method,compliance,comfort,efficiency,safety,total\n", 0) == 0);

  std::istringstream missing("method,metric,category,fail_rate\nA,lane,compliance,0.1\nB,jerk,comfort,0.2\n");
  CHECK_THROWS_AS(read_cces_csv(missing, "A"), ConfigError);
  std::istringstream header("m,x\n");
  CHECK_THROWS_AS(read_cces_csv(header, "A"), ConfigError);
}

TEST_CASE("rollout drift") {
  WorldConfig c;
  c.episode_len_s = 20.0;
  c.event_script = {{5.0, 1.0, EventKind::Brake, 2.0}};
  const auto ep = generate_episode(3, c);
  const auto V = static_cast<std::size_t>(ep.n_views);
  const auto d = static_cast<std::size_t>(ep.latent_dim);

  RolloutFrames perfect;
  RolloutFrames frozen;
  const int k0 = 16;
  Matrix still(V, d);
  for (std::size_t v = 0; v < V; ++v) {
    const auto src = ep.latent(k0, static_cast<int>(v));
    std::copy(src.begin(), src.end(), still.row(v).begin());
  }
  for (int k = k0 + 1; k <= k0 + 8; ++k) {
    Matrix m(V, d);
    for (std::size_t v = 0; v < V; ++v) {
      const auto src = ep.latent(k, static_cast<int>(v));
      std::copy(src.begin(), src.end(), m.row(v).begin());
    }
    perfect.steps.push_back(k);
    perfect.latents.push_back(m);
    frozen.steps.push_back(k);
    frozen.latents.push_back(still);
  }
  for (double e : rollout_drift(perfect, ep).error) CHECK(e == 0.0);

  // A frozen prediction falls behind the moving scene.
  const auto r = rollout_drift(frozen, ep);
  for (std::size_t i = 0; i < r.error.size(); ++i) {
    const int k = r.steps[i];
    double want = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = ep.latent(k, static_cast<int>(v))[j] - ep.latent(k0, static_cast<int>(v))[j];
        sq += diff * diff;
      }
      want += std::sqrt(sq) / static_cast<double>(V);
    }
    CHECK(r.error[i] == doctest::Approx(want).epsilon(1e-12));
    if (i > 0) CHECK(r.error[i] > r.error[i - 1]);
  }
  CHECK(r.event_steps == 4);  // 20..23 of 17..24
  CHECK(r.non_event_steps == 4);
  CHECK(std::isfinite(r.event_mean));
  CHECK(r.event_mean >= 0.0);

  std::ostringstream csv;
  write_drift_csv(csv, r, ep);
  CHECK(csv.str().rfind("step,error,in_event\n", 0) == 0);

  frozen.steps.back() = ep.n_steps;
  CHECK_THROWS_AS(rollout_drift(frozen, ep), PreconditionError);
  frozen.steps.pop_back();
  CHECK_THROWS_AS(rollout_drift(frozen, ep), PreconditionError);
}
