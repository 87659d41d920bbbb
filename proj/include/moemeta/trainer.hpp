#pragma once

// Meta-training loop, dev-set early stopping, meta-testing and run-directory
// artifacts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moemeta/adam.hpp"
#include "moemeta/evaluator.hpp"
#include "moemeta/graph.hpp"
#include "moemeta/model.hpp"
#include "moemeta/params.hpp"

namespace moemeta {

struct TrainConfig {
  std::size_t meta_batch_tasks = 1;
  std::size_t query_batch = 1024;  // query triplets per task, capped by what the relation has
  std::size_t shots = 5;
  std::size_t max_steps = 2000;
  std::size_t eval_every = 100;
  std::size_t patience = 10;  // evaluations without dev-MRR improvement before stopping
  AdamOptions adam;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};

void validate(const TrainConfig& config);

// The whole run configuration, as read from and written to JSON.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data;  // dataset directory; may be empty when given on the command line
};

// Unknown keys (at any level) raise a config error.
RunConfig run_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& config);

// Everything about meta-testing that a checkpoint must carry for exact replay.
struct EvalSetup {
  ModelConfig model;
  std::size_t shots = 5;
  std::uint64_t seed = 1;
};

struct EvalOutput {
  std::vector<RankResult> ranks;
  MetricsTable metrics;
  std::vector<GateProfile> gates;  // one per task, in task order (MoE runs only)
};

// Meta-test over `tasks` with frozen parameters: per task, relation-meta from
// the first `shots` triplets, eta init, inner adaptation on the support set,
// then ranking of every remaining triplet's tail among the relation's candidates.
EvalOutput meta_test(const Dataset& dataset, const std::vector<TaskSource>& tasks, const ParamSet& params,
                     const EvalSetup& setup, std::size_t workers = 1);

// Neighbor samples and eta inits are drawn from streams of the run seed.
NeighborCache make_neighbor_cache(const KnowledgeGraph& graph, const ModelConfig& model, std::uint64_t seed);
Eta initial_eta(const ModelConfig& model, std::uint64_t seed, std::uint64_t stream);

struct DevPoint {
  std::size_t step = 0;
  double mrr = 0.0;
};

struct TrainReport {
  std::vector<double> query_loss;  // mean per-task query loss of each outer step
  std::vector<DevPoint> dev_history;
  std::size_t best_step = 0;
  double best_dev_mrr = 0.0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  std::size_t skipped_tasks = 0;
  std::optional<MetricsTable> test_metrics;  // best parameters on the test split
  std::vector<double> step_seconds;           // wall clock; not part of to_json
};

nlohmann::json to_json(const TrainReport& report);

struct TrainOutcome {
  TrainReport report;
  ParamSet best;
  ParamSet last;
  AdamState adam;
};

// Runs meta-training. With `run_dir`, writes config.json, log.tsv, best.ckpt,
// last.ckpt, report.json and timing.json into it.
TrainOutcome meta_train(const Dataset& dataset, const RunConfig& config,
                        const std::optional<std::filesystem::path>& run_dir = std::nullopt);

// Checkpoint metadata round trip.
nlohmann::json checkpoint_meta(const EvalSetup& setup, std::size_t step);
EvalSetup eval_setup_from_meta(const nlohmann::json& meta);

// Category of every task relation, over background plus the task's triplets.
std::map<RelationId, RelationCategory> task_categories(const Dataset& dataset);

}  // namespace moemeta
