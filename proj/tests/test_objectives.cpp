#include <doctest.h>

#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/objectives.hpp"

using namespace foresight;

TEST_CASE("action loss") {
  const auto gt = Matrix::from_rows({{0.0}, {0.0}});
  CHECK(action_loss(Matrix::from_rows({{1.0}, {2.0}}), gt) == 1.5);
  CHECK(action_loss(gt, gt) == 0.0);
  const auto pred = Matrix::from_rows({{1.0, -2.0}, {0.5, 0.25}});
  const auto gt2 = Matrix::from_rows({{0.0, 0.0}, {0.0, 0.0}});
  // (3 + 0.75) / 2
  CHECK(action_loss(pred, gt2) == 1.875);
  auto scaled = pred;
  for (double& x : scaled.values()) x *= 3.0;
  CHECK(action_loss(scaled, gt2) == doctest::Approx(3.0 * 1.875));
  CHECK_THROWS_AS(action_loss(pred, Matrix(3, 2)), PreconditionError);
}

TEST_CASE("camera and bev losses") {
  CHECK(camera_loss(Matrix::from_rows({{3.0, 4.0}}), Matrix(1, 2), 1) == 5.0);
  CHECK(camera_loss(Matrix::from_rows({{3.0, 4.0}}), Matrix(1, 2), 1, true) == 25.0);
  CHECK(bev_loss(Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), Matrix(2, 2)) == 1.0);

  // Two views, two chunks: mean over the four (i, v) rows.
  const auto pred = Matrix::from_rows({{3, 4}, {0, 1}, {6, 8}, {0, 0}});
  CHECK(camera_loss(pred, Matrix(4, 2), 2) == doctest::Approx((5.0 + 1.0 + 10.0 + 0.0) / 4.0));
  // Row permutation applied to both sides.
  const auto perm = Matrix::from_rows({{6, 8}, {0, 0}, {3, 4}, {0, 1}});
  CHECK(camera_loss(perm, Matrix(4, 2), 2) == camera_loss(pred, Matrix(4, 2), 2));
  CHECK_THROWS_AS(camera_loss(pred, Matrix(4, 3), 2), PreconditionError);
  CHECK_THROWS_AS(camera_loss(pred, Matrix(4, 2), 3), PreconditionError);

  // Additivity over horizon halves, weighted by length.
  const auto a = Matrix::from_rows({{1, 2}});
  const auto b = Matrix::from_rows({{2, 0}, {0, 3}});
  const auto ab = Matrix::from_rows({{1, 2}, {2, 0}, {0, 3}});
  CHECK(bev_loss(ab, Matrix(3, 2)) ==
        doctest::Approx((1.0 * bev_loss(a, Matrix(1, 2)) + 2.0 * bev_loss(b, Matrix(2, 2))) / 3.0));
}

TEST_CASE("total loss") {
  CHECK(total_loss(1.0, 2.0, 3.0, LossWeights{0.5, 0.1}) == doctest::Approx(2.3).epsilon(1e-15));
  CHECK(total_loss(1.0, 2.0, 3.0, LossWeights{0.0, 0.0}) == 1.0);
  LossWeights bad{-1.0, 0.5};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  LossWeights w{0.7, 0.2, true};
  nlohmann::json j = w;
  LossWeights back;
  from_json(j, back);
  CHECK(back.alpha == 0.7);
  CHECK(back.squared_norm);
  j["gamma"] = 1;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
}

TEST_CASE("rectified flow pieces") {
  const std::vector<double> y0{0.0, 0.0};
  const std::vector<double> y1{2.0, 4.0};
  CHECK(rf_interpolate(y0, y1, 0.5) == std::vector<double>{1.0, 2.0});
  CHECK(rf_interpolate(y0, y1, 0.0) == y0);
  CHECK(rf_interpolate(y0, y1, 1.0) == y1);
  const auto f = rf_interpolate(y0, y1, 0.3);
  const auto r = rf_interpolate(y1, y0, 0.3);
  CHECK(f[0] + r[0] == doctest::Approx(2.0));
  CHECK(f[1] + r[1] == doctest::Approx(4.0));
  CHECK_THROWS_AS(rf_interpolate(y0, y1, 1.5), DomainError);

  CHECK(rf_velocity_loss(std::vector<double>{0.0}, std::vector<double>{0.0}, std::vector<double>{2.0}) == 4.0);
  CHECK(rf_velocity_loss(std::vector<double>{2.0, 4.0}, y0, y1) == 0.0);
  CHECK(rf_velocity_loss(std::vector<double>{1.0, 1.0}, std::vector<double>{5.0, 5.0},
                         std::vector<double>{7.0, 9.0}) ==
        rf_velocity_loss(std::vector<double>{1.0, 1.0}, y0, y1));
}

TEST_CASE("finite difference checker") {
  const ScalarFunction quad = [](std::span<const double> p) { return p[0] * p[0] + p[1] * p[1]; };
  const std::vector<double> p{1.0, 2.0};
  CHECK(finite_diff_check(quad, p, std::vector<double>{2.0, 4.0}) <= 1e-9);
  CHECK(finite_diff_check(quad, p, std::vector<double>{2.0, 4.5}) > 0.1);
  CHECK(finite_diff_check(quad, std::vector<double>{}, std::vector<double>{}) == 0.0);
  const ScalarFunction nan_fn = [](std::span<const double>) { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(finite_diff_check(nan_fn, p, std::vector<double>{0.0, 0.0}), RuntimeFailure);
}

TEST_CASE("linear velocity model reaches the least-squares solution") {
  const auto data = make_rf_toy(600, 5);
  // Normal equations solved independently of the trainer.
  Eigen::MatrixXd X(600, 4), Y(600, 2);
  for (Eigen::Index i = 0; i < 600; ++i) {
    const auto r = static_cast<std::size_t>(i);
    const auto yt = rf_interpolate(data.y0.row(r), data.y1.row(r), data.t[r]);
    X.row(i) << yt[0], yt[1], data.t[r], 1.0;
    Y(i, 0) = data.y1(r, 0) - data.y0(r, 0);
    Y(i, 1) = data.y1(r, 1) - data.y0(r, 1);
  }
  const Eigen::MatrixXd W = (X.transpose() * X).ldlt().solve(X.transpose() * Y).transpose();
  const auto model = train_linear_velocity(data, 0.05, 20000);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 4; ++b) {
      CHECK(model.weights(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) ==
            doctest::Approx(W(a, b)).epsilon(1e-6));
    }
  }
  // The dataset loss gradient matches finite differences.
  LinearVelocityModel probe;
  probe.weights = model.weights;
  probe.weights(0, 1) += 0.3;
  Matrix grad;
  rf_dataset_loss(probe, data, &grad);
  const ScalarFunction f = [&](std::span<const double> w) {
    LinearVelocityModel m;
    std::copy(w.begin(), w.end(), m.weights.values().begin());
    return rf_dataset_loss(m, data);
  };
  CHECK(finite_diff_check(f, probe.weights.values(), grad.values()) < 1e-6);
}
