#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moemeta/params.hpp"

namespace moemeta {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates per group; groups no larger than this are checked exhaustively.
  std::size_t max_coords_per_group = 64;
  // Denominator floor of the relative error, so coordinates whose true gradient
  // is ~0 are judged on an absolute scale of tolerance * floor.
  double relative_floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GroupCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double tolerance = 0.0;
  bool passed = false;

  double max_relative_error() const;
};

double relative_error(double analytic, double numeric, double floor);

// Compares params[g].grad (the analytic gradient, filled by the caller) against
// central differences (L(x+h) - L(x-h)) / 2h of `loss`, perturbing values in
// place and restoring them afterwards. The closure must be a deterministic
// function of the parameter values: two baseline evaluations that disagree
// abort the check with a determinism error.
GradCheckReport grad_check(const std::function<double()>& loss, ParamSet& params,
                           const GradCheckOptions& options = {});

}  // namespace moemeta
