#include "moemeta/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "moemeta/error.hpp"
#include "moemeta/rng.hpp"

namespace moemeta {

double GradCheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.max_relative_error);
  return worst;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

std::vector<std::size_t> pick_coords(const Tensor& grad, std::size_t cap, Rng& rng) {
  const std::size_t n = grad.size();
  std::vector<std::size_t> coords;
  if (n <= cap) {
    coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    return coords;
  }
  // Favour coordinates that carry gradient; a few zero ones guard against
  // missing contributions.
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < n; ++i) {
    if (grad[i] != 0.0) nonzero.push_back(i);
  }
  const std::size_t take_nonzero = std::min(nonzero.size(), cap - cap / 4);
  for (std::size_t idx : rng.sample_without_replacement(nonzero.size(), take_nonzero)) {
    coords.push_back(nonzero[idx]);
  }
  for (std::size_t idx : rng.sample_without_replacement(n, cap - coords.size())) coords.push_back(idx);
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

}  // namespace

GradCheckReport grad_check(const std::function<double()>& loss, ParamSet& params,
                           const GradCheckOptions& options) {
  const double base = loss();
  const double again = loss();
  if (!(base == again)) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "gradient check aborted: loss closure is not deterministic (" << base << " vs " << again
        << ")";
    fail(ErrorKind::kDeterminism, msg.str());
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (std::size_t gi = 0; gi < params.size(); ++gi) {
    ParamGroup& group = params[gi];
    GroupCheck check;
    check.name = group.name;
    for (std::size_t i : pick_coords(group.grad, options.max_coords_per_group, rng)) {
      double& x = group.value[i];
      const double saved = x;
      x = saved + options.step;
      const double plus = loss();
      x = saved - options.step;
      const double minus = loss();
      x = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double analytic = group.grad[i];
      const double err = relative_error(analytic, numeric, options.relative_floor);
      ++check.coords_checked;
      if (!(err <= check.max_relative_error)) {
        check.max_relative_error = err;
        check.worst_index = i;
        check.worst_analytic = analytic;
        check.worst_numeric = numeric;
      }
    }
    report.groups.push_back(check);
  }
  report.passed = std::all_of(report.groups.begin(), report.groups.end(), [&](const GroupCheck& g) {
    return g.max_relative_error <= options.tolerance;
  });
  return report;
}

}  // namespace moemeta
