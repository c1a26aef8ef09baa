#pragma once

#include <string>
#include <vector>

namespace exms {

struct CheckResult {
  std::string suite;
  std::string name;
  double tolerance = 0.0;
  double observed = 0.0;
  bool pass = false;
};

struct CheckOptions {
  // Adds a deliberate offset to one analytic gradient so the gradient suite
  // must fail; proves the finite-difference oracle actually bites.
  bool sabotage = false;
  int64_t instances = 20;  // random instances per gradient check
};

// Property suites with fixed seeds. Suites: gradients | attention | rope |
// losses | data | all. Unknown names raise UnknownSuite.
std::vector<CheckResult> run_check_suite(const std::string& suite,
                                         const CheckOptions& opts = {});

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace exms
