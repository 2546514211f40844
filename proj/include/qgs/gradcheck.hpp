#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qgs/autodiff.hpp"

namespace qgs {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares tape gradients of a scalar function against central differences
// (f(p + eps) - f(p - eps)) / (2 eps), coordinate by coordinate. The relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator. `f` must read
// the parameters through tape.param(). Values passed through stop_gradient are
// held at their unperturbed values, matching what the tape differentiates.
// With max_coords > 0, at most that many
// coordinates per parameter are sampled (deterministically from `seed`).
GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&)>& f,
                           const std::vector<Parameter<double>*>& params, double eps,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

}  // namespace qgs
