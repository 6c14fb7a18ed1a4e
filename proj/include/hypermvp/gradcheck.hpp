#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hypermvp/autodiff.hpp"

namespace hypermvp {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor of the per-coordinate relative error.
  double floor = 1e-3;
  // Check only this many randomly chosen coordinates (0 = all of them).
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords = 0;
};

// f maps inputs to a scalar loss. It is called once with tape leaves for the
// analytic gradient and repeatedly with constants for central differences.
using ScalarFn = std::function<ad::Var(std::span<const ad::Var>)>;

GradCheckReport gradient_check(const ScalarFn& f, const std::vector<ad::Tensor>& inputs,
                               const GradCheckOptions& options = {});

}  // namespace hypermvp
