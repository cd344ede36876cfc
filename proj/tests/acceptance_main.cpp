// Acceptance suite: one PASS/FAIL line per criterion, exit 4 on any failure.
#include <iostream>

#include <CLI11.hpp>

#include "foresight/acceptance.hpp"
#include "foresight/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"foresight acceptance suite"};
  foresight::AcceptanceOptions opts;
  std::vector<int> only;
  app.add_option("--work-dir", opts.work_dir, "Scratch directory (ablation checkpoints are reused from here)");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
  app.add_option("--repeats", opts.bench_repeats, "Timing repeats for the speedup check")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (!only.empty()) {
    opts.criteria = {only.begin(), only.end()};
  }
  try {
    const auto results = foresight::run_acceptance(opts, std::cout);
    int passed = 0;
    for (const auto& r : results) {
      passed += r.passed ? 1 : 0;
    }
    std::cout << passed << "/" << results.size() << " criteria passed\n";
    return foresight::acceptance_exit_code(results);
  } catch (const foresight::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
}
