#pragma once

#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/matrix.hpp"

namespace foresight {

struct LossWeights {
  double alpha = 1.0;  // camera
  double beta = 0.5;   // BEV
  // Use the squared Euclidean norm in the camera and BEV terms.
  bool squared_norm = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossBreakdown {
  double action = 0.0;
  double camera = 0.0;
  double bev = 0.0;
  double total = 0.0;
};

// (1/H) sum_i ||pred_i - gt_i||_1 over the H rows.
double action_loss(const Matrix& pred, const Matrix& gt);

// Rows are (i, v) pairs, row i * n_views + v; mean over rows of the per-row
// Euclidean norm (squared when requested).
double camera_loss(const Matrix& pred, const Matrix& gt, int n_views, bool squared = false);

double bev_loss(const Matrix& pred, const Matrix& gt, bool squared = false);

double total_loss(double l_act, double l_cam, double l_bev, const LossWeights& w);

std::vector<double> rf_interpolate(std::span<const double> y0, std::span<const double> y1, double t);

// ||v_pred - (y1 - y0)||^2
double rf_velocity_loss(std::span<const double> v_pred, std::span<const double> y0, std::span<const double> y1);

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences per coordinate compared with `analytic`; returns
// max_i |fd_i - g_i| / max(1, |g_i|). Zero for an empty parameter vector.
double finite_diff_check(const ScalarFunction& loss_fn, std::span<const double> params,
                         std::span<const double> analytic, double epsilon = 1e-6);

// Two-dimensional rectified-flow toy: y0 ~ N(mean, L L^T), y1 ~ N(0, I),
// t ~ U(0, 1).
struct RfToyData {
  Matrix y0, y1;
  std::vector<double> t;
  std::size_t size() const { return t.size(); }
};

RfToyData make_rf_toy(std::size_t n, std::uint64_t seed);

// Features of the linear velocity model: [y_t(0), y_t(1), t, 1].
std::vector<double> rf_linear_features(std::span<const double> yt, double t);

// v(y_t, t) = W * features, W is 2 x 4.
struct LinearVelocityModel {
  Matrix weights{2, 4};
  std::vector<double> predict(std::span<const double> yt, double t) const;
};

// Mean rf_velocity_loss over the data set and its gradient w.r.t. W.
double rf_dataset_loss(const LinearVelocityModel& model, const RfToyData& data, Matrix* grad = nullptr);

// Full-batch gradient descent with momentum until the gradient norm drops
// below tol or max_iters is reached.
LinearVelocityModel train_linear_velocity(const RfToyData& data, double lr, int max_iters, double tol = 1e-12);

}  // namespace foresight
