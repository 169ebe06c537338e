#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pas {

struct GradcheckResult {
  std::string name;
  std::size_t checked = 0;  // coordinates compared
  std::size_t skipped = 0;  // coordinates on a nondifferentiable kink
  double max_error = 0.0;   // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double tolerance = 0.0;
  bool pass = false;
};

// Central finite differences in double precision against the tape for every
// differentiable op and two small networks, plus the exact straight-through
// contract for the indicators. The relative-error floor is 1e-4 or 1e-3 of the
// tensor's largest gradient, whichever is larger.
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, double tolerance = 1e-6);

}  // namespace pas
