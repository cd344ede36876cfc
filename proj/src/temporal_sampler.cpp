#include "foresight/temporal_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "foresight/errors.hpp"

namespace foresight {

void ImportanceConfig::validate() const {
  if (!(lambda_x >= 0.0) || !(lambda_y >= 0.0)) {
    throw ConfigError("sampler: lambda_x and lambda_y must be >= 0");
  }
  if (!(tau > 0.0)) {
    throw ConfigError("sampler: tau must be > 0");
  }
  if (max_gap < 1) {
    throw ConfigError("sampler: max_gap must be >= 1");
  }
  if (!(epsilon_floor >= 0.0)) {
    throw ConfigError("sampler: epsilon_floor must be >= 0");
  }
  for (const auto& w : windows) {
    if (w.end < w.begin) {
      throw ConfigError("sampler: window end precedes begin");
    }
  }
}

void to_json(nlohmann::json& j, const ImportanceConfig& c) {
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& w : c.windows) {
    windows.push_back({w.begin, w.end});
  }
  j = nlohmann::json{{"lambda_x", c.lambda_x}, {"lambda_y", c.lambda_y},       {"windows", windows},
                     {"tau", c.tau},           {"max_gap", c.max_gap},         {"epsilon_floor", c.epsilon_floor}};
}

void from_json(const nlohmann::json& j, ImportanceConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda_x") {
      c.lambda_x = value.get<double>();
    } else if (key == "lambda_y") {
      c.lambda_y = value.get<double>();
    } else if (key == "tau") {
      c.tau = value.get<double>();
    } else if (key == "max_gap") {
      c.max_gap = value.get<int>();
    } else if (key == "epsilon_floor") {
      c.epsilon_floor = value.get<double>();
    } else if (key == "windows") {
      if (!value.is_array() || value.size() != 3) {
        throw ConfigError("sampler: windows must be three [begin, end] pairs");
      }
      for (std::size_t i = 0; i < 3; ++i) {
        c.windows[i] = {value[i].at(0).get<int>(), value[i].at(1).get<int>()};
      }
    } else {
      throw ConfigError("sampler: unknown key '" + key + "'");
    }
  }
}

std::vector<double> importance_scores(std::span<const double> a_x, std::span<const double> a_y,
                                      const ImportanceConfig& cfg) {
  cfg.validate();
  if (a_x.size() != a_y.size()) {
    throw PreconditionError("importance_scores: a_x and a_y lengths differ");
  }
  const int T = static_cast<int>(a_x.size());
  std::vector<double> magnitude(a_x.size());
  for (std::size_t t = 0; t < a_x.size(); ++t) {
    magnitude[t] = cfg.lambda_x * std::abs(a_x[t]) + cfg.lambda_y * std::abs(a_y[t]);
  }
  std::vector<double> w(a_x.size(), 0.0);
  for (int k = 0; k < T; ++k) {
    double score = 0.0;
    for (const auto& win : cfg.windows) {
      const int lo = std::max(0, k + win.begin);
      const int hi = std::min(T, k + win.end);
      if (lo >= hi) {
        continue;
      }
      score += *std::max_element(magnitude.begin() + lo, magnitude.begin() + hi);
    }
    w[static_cast<std::size_t>(k)] = score + cfg.epsilon_floor;
  }
  return w;
}

std::vector<double> sampling_distribution(std::span<const double> w, double tau) {
  if (!(tau > 0.0)) {
    throw ConfigError("sampling_distribution: tau must be > 0");
  }
  double max_log = -std::numeric_limits<double>::infinity();
  for (double x : w) {
    if (x < 0.0 || !std::isfinite(x)) {
      throw DomainError("sampling_distribution: scores must be finite and non-negative");
    }
    if (x > 0.0) {
      max_log = std::max(max_log, std::log(x));
    }
  }
  if (max_log == -std::numeric_limits<double>::infinity()) {
    throw DomainError("sampling_distribution: all scores are zero; set epsilon_floor > 0");
  }
  std::vector<double> p(w.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) {
      p[i] = std::exp((std::log(w[i]) - max_log) / tau);
      total += p[i];
    }
  }
  for (auto& x : p) {
    x /= total;
  }
  return p;
}

ScoredTrajectory score_trajectory(std::span<const double> a_x, std::span<const double> a_y,
                                  const ImportanceConfig& cfg) {
  ScoredTrajectory s;
  s.a_x.assign(a_x.begin(), a_x.end());
  s.a_y.assign(a_y.begin(), a_y.end());
  s.w = importance_scores(a_x, a_y, cfg);
  s.p = sampling_distribution(s.w, cfg.tau);
  return s;
}

namespace {

int draw_in_window(std::span<const double> p, int lo, int hi, Rng& rng) {
  double mass = 0.0;
  for (int i = lo; i <= hi; ++i) {
    mass += p[static_cast<std::size_t>(i)];
  }
  if (!(mass > 0.0)) {
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  const double u = rng.uniform() * mass;
  double cumulative = 0.0;
  for (int i = lo; i <= hi; ++i) {
    cumulative += p[static_cast<std::size_t>(i)];
    if (u < cumulative) {
      return i;
    }
  }
  // u landed in the rounding slack at the top; take the last positive entry.
  for (int i = hi; i >= lo; --i) {
    if (p[static_cast<std::size_t>(i)] > 0.0) {
      return i;
    }
  }
  return hi;
}

}  // namespace

std::vector<int> sample_steps(std::span<const double> p, int n_steps, int max_gap, Rng& rng) {
  const int T = static_cast<int>(p.size());
  if (n_steps < 1) {
    throw ConfigError("sample_steps: n_steps must be >= 1");
  }
  if (max_gap < 1) {
    throw ConfigError("sample_steps: max_gap must be >= 1");
  }
  if (n_steps > T) {
    throw ConfigError("sample_steps: cannot place " + std::to_string(n_steps) + " steps in " + std::to_string(T) +
                      " candidates");
  }
  std::vector<int> steps;
  steps.reserve(static_cast<std::size_t>(n_steps));
  steps.push_back(draw_in_window(p, 0, T - n_steps, rng));
  for (int j = 1; j < n_steps; ++j) {
    const int prev = steps.back();
    const int remaining_after = n_steps - j - 1;
    const int lo = prev + 1;
    const int hi = std::min(prev + max_gap, T - 1 - remaining_after);
    steps.push_back(draw_in_window(p, lo, hi, rng));
  }
  return steps;
}

std::vector<int> uniform_baseline(int T, int n_steps, Rng& rng) {
  if (n_steps < 1) {
    throw ConfigError("uniform_baseline: n_steps must be >= 1");
  }
  if (n_steps > T) {
    throw ConfigError("uniform_baseline: n_steps exceeds T");
  }
  std::vector<int> pool(static_cast<std::size_t>(T));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < n_steps; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(T - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(n_steps));
  std::sort(pool.begin(), pool.end());
  return pool;
}

void write_sampler_csv(std::ostream& out, const ScoredTrajectory& s) {
  out << "step,a_x,a_y,w,p\n";
  for (std::size_t k = 0; k < s.w.size(); ++k) {
    out << k << ',' << s.a_x[k] << ',' << s.a_y[k] << ',' << s.w[k] << ',' << s.p[k] << '\n';
  }
}

}  // namespace foresight
