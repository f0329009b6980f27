#pragma once

// Acceptance criteria as runnable checks, shared by `srdit check` and the
// acceptance binary.

#include <functional>
#include <string>
#include <vector>

namespace srdit::checks {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;

  /// "[PASS] 3 time-shift suite: ... (0.01s)"
  [[nodiscard]] std::string line() const;
};

struct CheckOptions {
  bool include_toy = true;
  std::string work_dir = "srdit_check";
};

CheckResult gradient_oracle();
CheckResult routing_equivalence();
CheckResult time_shift_suite();
CheckResult rope_suite();
CheckResult loss_oracles();
CheckResult guidance_collapse();
CheckResult kernel_distance_oracles();
CheckResult toy_convergence(const std::string& work_dir);
CheckResult flop_accounting();
CheckResult determinism_and_persistence(const std::string& work_dir);

std::vector<CheckResult> run_all(const CheckOptions& options,
                                 const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace srdit::checks
