#include "moemeta/model_check.hpp"

#include <algorithm>

#include "moemeta/error.hpp"
#include "moemeta/rng.hpp"

namespace moemeta {

namespace {

Eta eta_from(const ParamSet& params, std::size_t first) {
  auto copy = [&](std::size_t g) {
    const auto v = params[g].value.data();
    return std::vector<double>(v.begin(), v.end());
  };
  return Eta{copy(first), copy(first + 1), copy(first + 2)};
}

}  // namespace

ModelCheckResult check_model_gradients(const Dataset& dataset, const ModelConfig& model,
                                       const ModelCheckOptions& options) {
  Rng rng(options.seed);
  ParamSet params = create_params(model, dataset.graph, rng);
  const std::size_t d = model.embed_dim;

  // Nonzero eta so the projection terms are exercised even for a zero init.
  const std::size_t eta_first = params.size();
  const Eta start = Eta::gaussian(d, 0.3, rng);
  for (const auto* part : {&start.head, &start.relation, &start.tail}) {
    Tensor t(d);
    std::copy(part->begin(), part->end(), t.data().begin());
    const char* name = part == &start.head ? "eta.head" : part == &start.relation ? "eta.relation" : "eta.tail";
    params.add(name, std::move(t));
  }

  const MoEMeta net(model, params);
  const NeighborCache cache(dataset.graph, model.neighbor_cap, derive_seed(options.seed, 1));
  Rng task_rng = rng.derive(2);
  const std::size_t steps = model.inner_steps;
  // A zero query loss makes the check vacuous, so redraw a few times.
  Task task;
  TaskExample example;
  for (int attempt = 0; attempt < 32; ++attempt) {
    task = sample_task(dataset.graph, dataset.split.train, options.shots, options.queries, task_rng);
    example = attach_negatives(dataset.graph, task, model.negatives_per_positive, task_rng);
    if (net.run_task(example, cache, eta_from(params, eta_first), steps, nullptr).query_loss > 0.0) break;
  }

  params.zero_grads();
  GradBuffer buffer(params, net.row_sparse_groups());
  const TaskResult analytic = net.run_task(example, cache, eta_from(params, eta_first), steps, &buffer);
  if (!analytic.finite) fail(ErrorKind::kNumeric, "gradient check episode produced a non-finite loss or gradient");
  buffer.merge_into(params);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& src = k == 0 ? analytic.eta_grad.head : k == 1 ? analytic.eta_grad.relation : analytic.eta_grad.tail;
    std::copy(src.begin(), src.end(), params[eta_first + k].grad.data().begin());
  }

  auto loss = [&] { return net.run_task(example, cache, eta_from(params, eta_first), steps, nullptr).query_loss; };
  ModelCheckResult result;
  result.loss = analytic.query_loss;
  result.relation = task.relation;
  result.report = grad_check(loss, params, options.check);
  return result;
}

}  // namespace moemeta
