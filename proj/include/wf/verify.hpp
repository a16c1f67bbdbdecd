#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace wf {

struct CriterionResult {
  int index = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Runs the full oracle/invariant acceptance suite, printing one pass/fail
// line per criterion to `out`. Scratch files (checkpoints, metrics) go under
// `scratch_dir`. Returns every criterion's result; the run is not aborted by
// a failing criterion.
std::vector<CriterionResult> run_acceptance(std::ostream& out, const std::string& scratch_dir);

bool all_passed(const std::vector<CriterionResult>& results);

}  // namespace wf
