#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "foresight/synth_world.hpp"

namespace foresight {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct TrajectoryPair {
  std::vector<Point2> pred;
  std::vector<Point2> gt;
};

struct DisplacementErrors {
  double lat_ade = 0.0;
  double long_ade = 0.0;
  double lat_fde = 0.0;
  double long_fde = 0.0;
};

// Errors are projected on the ground-truth heading at each step: the forward
// difference tangent (backward at the last step), reusing the previous heading
// where the ground truth does not move.
DisplacementErrors ade_fde(const TrajectoryPair& pair);

enum class CcesCategory : std::uint8_t { Compliance, Comfort, Efficiency, Safety };
std::string_view to_string(CcesCategory c);
CcesCategory cces_category_from_string(std::string_view name);

struct CcesTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<CcesCategory> category;          // per metric
  std::vector<std::vector<double>> fail_rate;  // [method][metric]
  std::string reference;
};

struct CcesScores {
  std::string method;
  std::array<double, 4> category{};  // Compliance, Comfort, Efficiency, Safety
  double total = 0.0;
};

// ratio = rate / reference rate; category = unweighted mean of its ratios;
// Total = sum of the four category values.
std::vector<CcesScores> cces_aggregate(const CcesTable& table);

double cces_total(const std::array<double, 4>& category_values);

// Long format: method,metric,category,fail_rate
CcesTable read_cces_csv(std::istream& in, const std::string& reference);
// method,compliance,comfort,efficiency,safety,total
void write_cces_csv(std::ostream& out, const std::vector<CcesScores>& scores);

// Latent frames predicted by a closed-loop rollout, keyed by episode step.
struct RolloutFrames {
  std::vector<int> steps;
  std::vector<Matrix> latents;  // per step: n_views x latent_dim
};

struct DriftReport {
  std::vector<int> steps;
  std::vector<double> error;  // mean over views of the L2 latent error
  double event_mean = 0.0;
  double non_event_mean = 0.0;
  int event_steps = 0;
  int non_event_steps = 0;
};

DriftReport rollout_drift(const RolloutFrames& trace, const Episode& episode);

// step,error,in_event
void write_drift_csv(std::ostream& out, const DriftReport& report, const Episode& episode);

bool step_in_event(const Episode& episode, int step);

}  // namespace foresight
