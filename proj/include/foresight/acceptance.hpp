#pragma once

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "foresight/experiment.hpp"

namespace foresight {

struct CriterionResult {
  int id = 0;
  std::string title;
  bool passed = false;
  std::string detail;       // one-line summary of the measured values
  std::string diagnostics;  // optional multi-line table
  double cpu_seconds = 0.0;
  double cpu_limit_seconds = 0.0;
};

struct AcceptanceOptions {
  std::set<int> criteria{1, 2, 3, 4, 5, 6, 7, 8, 9};
  // Scratch space for the ablation run and the drift CSVs. Empty: a directory
  // under the system temp path.
  std::filesystem::path work_dir;
  ExperimentPlan plan = preset_plan("full");
  int bench_repeats = 5;
};

// Each check returns its own verdict; none throws on a failed inequality.
CriterionResult check_oracle_equivalence();
CriterionResult check_linear_growth();
CriterionResult check_speedup(int repeats = 5);
CriterionResult check_sampler();
CriterionResult check_cces();
CriterionResult check_gradients();
CriterionResult check_ablation(const ExperimentPlan& plan, const std::filesystem::path& work_dir);
CriterionResult check_rollout_consistency(const std::filesystem::path& work_dir);
CriterionResult check_rectified_flow();

// Runs the selected criteria in order, writing one line per criterion (and any
// diagnostics) to `out` as each finishes.
std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts, std::ostream& out);

std::string format_result_line(const CriterionResult& r);

// 0 when every result passed, 4 otherwise.
int acceptance_exit_code(const std::vector<CriterionResult>& results);

}  // namespace foresight
