#include <cmath>
#include <set>

#include <doctest.h>

#include "exms/checks.hpp"
#include "exms/errors.hpp"

using namespace exms;

TEST_CASE("every suite passes on a healthy build") {
  CheckOptions opts;
  opts.instances = 4;  // trimmed for test speed; acceptance runs the default
  std::vector<CheckResult> res = run_check_suite("all", opts);
  REQUIRE(all_passed(res));

  std::set<std::string> suites;
  for (const CheckResult& r : res) {
    suites.insert(r.suite);
    CHECK(!r.name.empty());
    CHECK(r.tolerance >= 0.0);
    CHECK(std::isfinite(r.observed));
    CHECK(r.observed <= r.tolerance);
  }
  CHECK(suites == std::set<std::string>{"gradients", "attention", "rope", "losses", "data"});

  std::vector<CheckResult> only = run_check_suite("rope");
  for (const CheckResult& r : only) CHECK(r.suite == "rope");
  CHECK(only.size() == 4);
}

TEST_CASE("sabotage makes the gradient suite fail") {
  CheckOptions opts;
  opts.sabotage = true;
  opts.instances = 1;
  std::vector<CheckResult> res = run_check_suite("gradients", opts);
  CHECK(!all_passed(res));
  int64_t failures = 0;
  for (const CheckResult& r : res)
    if (!r.pass) {
      ++failures;
      CHECK(r.observed > r.tolerance);
    }
  CHECK(failures == static_cast<int64_t>(res.size()));  // every check has a poisoned slot
}

TEST_CASE("unknown suite names are rejected") {
  CHECK_THROWS_AS(run_check_suite("bogus"), Error);
  try {
    run_check_suite("gradient");  // close but not a suite
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnknownSuite);
  }
  CHECK(!all_passed({}));
}
