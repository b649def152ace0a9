#pragma once

// Finite-difference verification of every differentiable layer, shared by
// the gradcheck command and the test suites.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dmha {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;  // coordinates compared
  std::size_t skipped = 0;  // probes straddling a ReLU or max-pool kink
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-4;

// Random inputs and parameters drawn from `seed`; every check uses central
// differences with step 1e-5 on small shapes. Losses are random projections
// of each layer's output so that gradients are O(1). A layer passes when the
// worst relative error is within `tolerance` and at most a fifth of its
// probes had to be excluded for straddling a kink.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed,
                                                 double tolerance = kGradCheckTolerance);

}  // namespace dmha
