#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moemeta/params.hpp"

namespace moemeta {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static AdamState for_params(const ParamSet& params, AdamOptions options = {});
};

// One bias-corrected Adam update of every trainable group. Gradients are left
// untouched. A non-finite gradient raises a numeric error naming the group and
// leaves parameters and state unchanged.
void adam_step(ParamSet& params, AdamState& state);

// value -= lr * grad
void gradient_step(std::span<double> value, std::span<const double> grad, double learning_rate);

}  // namespace moemeta
