#include "foresight/objectives.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"
#include "foresight/rng.hpp"

namespace foresight {

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw ConfigError("loss weights: alpha and beta must be >= 0");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"alpha", w.alpha}, {"beta", w.beta}, {"squared_norm", w.squared_norm}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") {
      w.alpha = value.get<double>();
    } else if (key == "beta") {
      w.beta = value.get<double>();
    } else if (key == "squared_norm") {
      w.squared_norm = value.get<bool>();
    } else {
      throw ConfigError("loss: unknown key '" + key + "'");
    }
  }
}

double action_loss(const Matrix& pred, const Matrix& gt) {
  require_same_shape(pred, gt, "action_loss");
  if (pred.rows() == 0) {
    throw PreconditionError("action_loss: empty horizon");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sum += std::abs(pred.data()[i] - gt.data()[i]);
  }
  return sum / static_cast<double>(pred.rows());
}

double camera_loss(const Matrix& pred, const Matrix& gt, int n_views, bool squared) {
  require_same_shape(pred, gt, "camera_loss");
  if (n_views < 1 || pred.rows() == 0 || pred.rows() % static_cast<std::size_t>(n_views) != 0) {
    throw PreconditionError("camera_loss: rows must be a positive multiple of n_views");
  }
  double sum = 0.0;
  for (std::size_t r = 0; r < pred.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < pred.cols(); ++c) {
      const double e = pred(r, c) - gt(r, c);
      sq += e * e;
    }
    sum += squared ? sq : std::sqrt(sq);
  }
  return sum / static_cast<double>(pred.rows());
}

double bev_loss(const Matrix& pred, const Matrix& gt, bool squared) { return camera_loss(pred, gt, 1, squared); }

double total_loss(double l_act, double l_cam, double l_bev, const LossWeights& w) {
  w.validate();
  return l_act + w.alpha * l_cam + w.beta * l_bev;
}

std::vector<double> rf_interpolate(std::span<const double> y0, std::span<const double> y1, double t) {
  if (y0.size() != y1.size()) {
    throw PreconditionError("rf_interpolate: dimension mismatch");
  }
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError("rf_interpolate: t must lie in [0, 1]");
  }
  std::vector<double> yt(y0.size());
  for (std::size_t i = 0; i < y0.size(); ++i) {
    yt[i] = (1.0 - t) * y0[i] + t * y1[i];
  }
  return yt;
}

double rf_velocity_loss(std::span<const double> v_pred, std::span<const double> y0, std::span<const double> y1) {
  if (v_pred.size() != y0.size() || y0.size() != y1.size()) {
    throw PreconditionError("rf_velocity_loss: dimension mismatch");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < v_pred.size(); ++i) {
    const double e = v_pred[i] - (y1[i] - y0[i]);
    sum += e * e;
  }
  return sum;
}

double finite_diff_check(const ScalarFunction& loss_fn, std::span<const double> params,
                         std::span<const double> analytic, double epsilon) {
  if (params.size() != analytic.size()) {
    throw PreconditionError("finite_diff_check: gradient length differs from parameter count");
  }
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ConfigError("finite_diff_check: epsilon must lie in [1e-7, 1e-3]");
  }
  std::vector<double> p(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + epsilon;
    const double up = loss_fn(p);
    p[i] = saved - epsilon;
    const double down = loss_fn(p);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw RuntimeFailure("finite_diff_check: non-finite loss at coordinate " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(fd - analytic[i]) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

RfToyData make_rf_toy(std::size_t n, std::uint64_t seed) {
  // Data covariance L L^T with L = [[1.0, 0], [0.6, 0.5]], mean (2, -1).
  constexpr double mean[2] = {2.0, -1.0};
  constexpr double l00 = 1.0, l10 = 0.6, l11 = 0.5;
  Rng rng(seed);
  RfToyData data{Matrix(n, 2), Matrix(n, 2), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double z0 = rng.normal();
    const double z1 = rng.normal();
    data.y0(i, 0) = mean[0] + l00 * z0;
    data.y0(i, 1) = mean[1] + l10 * z0 + l11 * z1;
    data.y1(i, 0) = rng.normal();
    data.y1(i, 1) = rng.normal();
    data.t[i] = rng.uniform();
  }
  return data;
}

std::vector<double> rf_linear_features(std::span<const double> yt, double t) { return {yt[0], yt[1], t, 1.0}; }

std::vector<double> LinearVelocityModel::predict(std::span<const double> yt, double t) const {
  const auto f = rf_linear_features(yt, t);
  std::vector<double> v(2, 0.0);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      v[r] += weights(r, c) * f[c];
    }
  }
  return v;
}

double rf_dataset_loss(const LinearVelocityModel& model, const RfToyData& data, Matrix* grad) {
  if (grad != nullptr) {
    *grad = Matrix(2, 4);
  }
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto yt = rf_interpolate(data.y0.row(i), data.y1.row(i), data.t[i]);
    const auto v = model.predict(yt, data.t[i]);
    total += rf_velocity_loss(v, data.y0.row(i), data.y1.row(i));
    if (grad != nullptr) {
      const auto f = rf_linear_features(yt, data.t[i]);
      for (std::size_t r = 0; r < 2; ++r) {
        const double e = v[r] - (data.y1(i, r) - data.y0(i, r));
        for (std::size_t c = 0; c < 4; ++c) {
          (*grad)(r, c) += 2.0 * e * f[c] * inv_n;
        }
      }
    }
  }
  return total * inv_n;
}

LinearVelocityModel train_linear_velocity(const RfToyData& data, double lr, int max_iters, double tol) {
  LinearVelocityModel model;
  Matrix velocity(2, 4);
  Matrix grad;
  for (int it = 0; it < max_iters; ++it) {
    rf_dataset_loss(model, data, &grad);
    double norm = 0.0;
    for (double g : grad.values()) {
      norm += g * g;
    }
    if (std::sqrt(norm) < tol) {
      break;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      velocity.data()[i] = 0.9 * velocity.data()[i] - lr * grad.data()[i];
      model.weights.data()[i] += velocity.data()[i];
    }
  }
  return model;
}

}  // namespace foresight
