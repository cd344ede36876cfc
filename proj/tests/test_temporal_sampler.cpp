#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/rng.hpp"
#include "foresight/temporal_sampler.hpp"

using namespace foresight;

namespace {

ImportanceConfig no_floor() {
  ImportanceConfig c;
  c.epsilon_floor = 0.0;
  return c;
}

}  // namespace

TEST_CASE("importance scores: hand-computed window maxima") {
  // a_x(10..12) = -3; W1 = [k, k+4), W2 = [k+4, k+10), W3 = [k-4, k).
  std::vector<double> ax(20, 0.0);
  std::vector<double> ay(20, 0.0);
  ax[10] = ax[11] = ax[12] = -3.0;
  auto cfg = no_floor();
  cfg.windows = {{{0, 4}, {4, 10}, {-4, 0}}};
  const auto w = importance_scores(ax, ay, cfg);
  // k=8: W1 covers 8..11 (max 3), W2 covers 12..17 (max 3 at t=12), W3 covers 4..7 (0).
  CHECK(w[8] == 6.0);
  // k=13: W1 13..16 (0), W2 17..19 clipped (0), W3 9..12 (3).
  CHECK(w[13] == 3.0);
  // k=0: all windows miss the event.
  CHECK(w[0] == 0.0);
  // k=19: W1 19 only, W2 empty after clipping, W3 15..18.
  CHECK(w[19] == 0.0);
}

TEST_CASE("importance scores: zero, floor and homogeneity") {
  std::vector<double> zeros(12, 0.0);
  for (double x : importance_scores(zeros, zeros, no_floor())) CHECK(x == 0.0);
  for (double x : importance_scores(zeros, zeros, ImportanceConfig{})) CHECK(x == 1e-3);

  Rng rng(1);
  std::vector<double> ax(30), ay(30);
  for (std::size_t t = 0; t < 30; ++t) {
    ax[t] = rng.normal();
    ay[t] = rng.normal();
  }
  auto cfg = no_floor();
  const auto w1 = importance_scores(ax, ay, cfg);
  cfg.lambda_x *= 2.5;
  cfg.lambda_y *= 2.5;
  const auto w2 = importance_scores(ax, ay, cfg);
  for (std::size_t k = 0; k < w1.size(); ++k) CHECK(w2[k] == doctest::Approx(2.5 * w1[k]).epsilon(1e-14));

  CHECK_THROWS_AS(importance_scores(ax, std::vector<double>(29), cfg), PreconditionError);
}

TEST_CASE("importance scores are monotone in |a_x|") {
  Rng rng(2);
  std::vector<double> ax(25), ay(25);
  for (std::size_t t = 0; t < 25; ++t) {
    ax[t] = rng.normal();
    ay[t] = rng.normal();
  }
  const auto before = importance_scores(ax, ay, ImportanceConfig{});
  ax[12] = 3.0 * (std::fabs(ax[12]) + 1.0);
  const auto after = importance_scores(ax, ay, ImportanceConfig{});
  for (std::size_t k = 0; k < before.size(); ++k) CHECK(after[k] >= before[k]);
}

TEST_CASE("sampling distribution") {
  const std::vector<double> flat{1, 1, 1, 1};
  for (double tau : {0.1, 0.7, 3.0}) {
    for (double p : sampling_distribution(flat, tau)) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  }
  const auto p1 = sampling_distribution(std::vector<double>{1, 4}, 1.0);
  CHECK(p1[0] == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(p1[1] == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(sampling_distribution(std::vector<double>{1, 4}, 0.05)[1] > 0.99);

  // Scale invariance and temperature ordering.
  const std::vector<double> w{0.3, 2.0, 0.7, 1.1};
  std::vector<double> w10(w);
  for (double& x : w10) x *= 10.0;
  double prev = 0.0;
  for (double tau : {2.0, 1.0, 0.5, 0.25}) {
    const auto p = sampling_distribution(w, tau);
    const auto q = sampling_distribution(w10, tau);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t k = 0; k < p.size(); ++k) CHECK(p[k] == doctest::Approx(q[k]).epsilon(1e-12));
    CHECK(p[1] >= prev);
    prev = p[1];
  }
  CHECK_THROWS_WITH_AS(sampling_distribution(std::vector<double>{0, 0}, 1.0), doctest::Contains("epsilon_floor"),
                       DomainError);
}

TEST_CASE("constrained step sampling") {
  Rng rng(5);
  const std::vector<double> uniform(20, 0.05);
  const auto adj = sample_steps(uniform, 6, 1, rng);
  for (std::size_t i = 1; i < adj.size(); ++i) CHECK(adj[i] == adj[i - 1] + 1);

  // Mass on one index, gaps still bounded.
  std::vector<double> spike(40, 1e-9);
  spike[35] = 1.0;
  double total = std::accumulate(spike.begin(), spike.end(), 0.0);
  for (double& x : spike) x /= total;
  for (int s = 0; s < 1000; ++s) {
    Rng r(static_cast<std::uint64_t>(s));
    const auto steps = sample_steps(spike, 4, 3, r);
    REQUIRE(steps.size() == 4);
    for (std::size_t i = 1; i < steps.size(); ++i) {
      CHECK(steps[i] > steps[i - 1]);
      CHECK(steps[i] - steps[i - 1] <= 3);
    }
  }

  // Determinism.
  Rng a(9), b(9);
  CHECK(sample_steps(spike, 5, 4, a) == sample_steps(spike, 5, 4, b));

  CHECK_THROWS_AS(sample_steps(uniform, 0, 2, rng), ConfigError);
  CHECK_THROWS_AS(sample_steps(uniform, 21, 2, rng), ConfigError);
  CHECK_THROWS_AS(sample_steps(uniform, 3, 0, rng), ConfigError);
}

TEST_CASE("uniform baseline") {
  Rng rng(1);
  CHECK(uniform_baseline(5, 5, rng) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(uniform_baseline(5, 0, rng), ConfigError);
  CHECK_THROWS_AS(uniform_baseline(5, 6, rng), ConfigError);

  constexpr int T = 10, n = 3, runs = 100000;
  std::vector<double> hits(T, 0.0);
  for (int s = 0; s < runs; ++s) {
    Rng r(static_cast<std::uint64_t>(s) + 17);
    const auto idx = uniform_baseline(T, n, r);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    for (int i : idx) hits[static_cast<std::size_t>(i)] += 1.0;
  }
  for (double h : hits) CHECK(std::fabs(h / runs - 0.3) <= 0.01);
}

TEST_CASE("config validation, json and csv") {
  ImportanceConfig c;
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ImportanceConfig{};
  c.lambda_y = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  ImportanceConfig d;
  d.tau = 0.3;
  d.windows[1] = {5, 9};
  nlohmann::json j = d;
  ImportanceConfig back;
  from_json(j, back);
  CHECK(back.tau == 0.3);
  CHECK(back.windows[1] == StepWindow{5, 9});
  j["nope"] = 0;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);

  const std::vector<double> ax{0.0, 1.0, -2.0};
  const std::vector<double> ay{0.5, 0.0, 0.0};
  const auto s = score_trajectory(ax, ay, ImportanceConfig{});
  std::ostringstream csv;
  write_sampler_csv(csv, s);
  std::string header;
  std::istringstream in(csv.str());
  std::getline(in, header);
  CHECK(header == "step,a_x,a_y,w,p");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3);
}
