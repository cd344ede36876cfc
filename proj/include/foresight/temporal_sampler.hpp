#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/rng.hpp"

namespace foresight {

// Step offsets [begin, end) relative to the candidate step k.
struct StepWindow {
  int begin = 0;
  int end = 0;
  friend bool operator==(const StepWindow&, const StepWindow&) = default;
};

struct ImportanceConfig {
  double lambda_x = 1.0;
  double lambda_y = 2.0;
  // Near-future, mid-horizon, recent-history at 4 Hz.
  std::array<StepWindow, 3> windows{{{0, 4}, {4, 12}, {-4, 0}}};
  double tau = 0.7;
  int max_gap = 8;
  double epsilon_floor = 1e-3;

  void validate() const;
};

void to_json(nlohmann::json& j, const ImportanceConfig& c);
void from_json(const nlohmann::json& j, ImportanceConfig& c);

struct ScoredTrajectory {
  std::vector<double> a_x, a_y, w, p;
};

// w_k = sum over windows of max_{t in W_k ∩ [0,T)} (lx |a_x(t)| + ly |a_y(t)|),
// empty windows contributing 0, plus epsilon_floor.
std::vector<double> importance_scores(std::span<const double> a_x, std::span<const double> a_y,
                                      const ImportanceConfig& cfg);

// p_k = w_k^(1/tau) / sum_j w_j^(1/tau), evaluated in log space.
std::vector<double> sampling_distribution(std::span<const double> w, double tau);

ScoredTrajectory score_trajectory(std::span<const double> a_x, std::span<const double> a_y,
                                  const ImportanceConfig& cfg);

// Ascending step indices with consecutive gaps <= max_gap. The first index is
// drawn from p over the positions that leave room for the remaining steps;
// each later index from p renormalized over (prev, prev + max_gap] with the
// same room constraint. A window with zero mass is sampled uniformly.
std::vector<int> sample_steps(std::span<const double> p, int n_steps, int max_gap, Rng& rng);

// n_steps distinct indices from [0, T), uniform without replacement, sorted.
std::vector<int> uniform_baseline(int T, int n_steps, Rng& rng);

// CSV: step,a_x,a_y,w,p
void write_sampler_csv(std::ostream& out, const ScoredTrajectory& s);

}  // namespace foresight
