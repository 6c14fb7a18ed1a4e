#pragma once

// Self-check of the geometry, gradients, losses, masking and renderer, as run
// by `hypermvp verify`.

#include <cstdint>
#include <string>
#include <vector>

namespace hypermvp::verify {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<CheckResult> run_all(std::uint64_t seed = 0);
// Fixed-width table, one row per check, plus a summary line.
std::string format_table(const std::vector<CheckResult>& results);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace hypermvp::verify
