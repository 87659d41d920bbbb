#pragma once

// End-to-end finite-difference check of the episode gradient: every parameter
// group plus the initial projection vectors, with the inner loop re-run inside
// the loss closure.

#include <cstddef>
#include <cstdint>

#include "moemeta/grad_check.hpp"
#include "moemeta/graph.hpp"
#include "moemeta/model.hpp"

namespace moemeta {

struct ModelCheckOptions {
  std::size_t shots = 2;
  std::size_t queries = 3;
  std::uint64_t seed = 11;
  GradCheckOptions check;
};

struct ModelCheckResult {
  GradCheckReport report;
  double loss = 0.0;
  RelationId relation = 0;
};

// Draws one training episode from `dataset`, builds fresh parameters with
// `model`, and compares analytic against numeric gradients. The eta groups
// appear in the report as "eta.head", "eta.relation" and "eta.tail".
ModelCheckResult check_model_gradients(const Dataset& dataset, const ModelConfig& model,
                                       const ModelCheckOptions& options);

}  // namespace moemeta
