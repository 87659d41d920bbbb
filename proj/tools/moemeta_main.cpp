// moemeta: dataset validation, synthetic generation, training, evaluation,
// gradient checking and gate-profile export.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "moemeta/checkpoint.hpp"
#include "moemeta/error.hpp"
#include "moemeta/model_check.hpp"
#include "moemeta/synthetic.hpp"
#include "moemeta/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moemeta;

namespace {

constexpr const char* kDataRootEnv = "MOEMETA_DATA_ROOT";

// --data falls back to $MOEMETA_DATA_ROOT; relative paths that do not exist
// are looked up under it.
fs::path resolve_data(const std::string& given) {
  const char* root = std::getenv(kDataRootEnv);
  if (given.empty()) {
    if (!root || !*root) fail(ErrorKind::kConfig, std::string("no --data given and ") + kDataRootEnv + " is unset");
    return root;
  }
  fs::path p(given);
  if (p.is_relative() && !fs::exists(p) && root && *root) return fs::path(root) / p;
  return p;
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::kLoad, "cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kLoad, "cannot write " + path.string());
  f << text;
}

void print_metrics(const char* label, const MetricsTable& t, bool breakdown) {
  std::printf("%s: queries=%zu mrr=%.4f hits@1=%.4f hits@5=%.4f hits@10=%.4f\n", label, t.overall.queries,
              t.overall.mrr, t.overall.hits1, t.overall.hits5, t.overall.hits10);
  if (!breakdown) return;
  for (const auto& [category, m] : t.by_category) {
    std::printf("  %-4s queries=%zu mrr=%.4f hits@1=%.4f hits@5=%.4f hits@10=%.4f\n", category_name(category),
                m.queries, m.mrr, m.hits1, m.hits5, m.hits10);
  }
}

struct Options {
  std::string data;
  std::string config;
  std::string out;
  std::string ckpt;
  std::uint64_t seed = 1;
  bool seed_given = false;
  std::size_t workers = 0;
  std::size_t shots = 0;
  bool breakdown = false;
  bool no_neighbor_agg = false;
  bool no_moe = false;
  bool no_local_adapt = false;
  std::string split = "test";
  bool all_relations = false;
  std::size_t dim = 4;
  double tol = 1e-4;
};

int cmd_validate(const Options& o) {
  const fs::path dir = resolve_data(o.data);
  const Dataset ds = load_dataset(dir);
  std::printf("entities=%zu triplets=%zu tasks=%zu\n", ds.graph.num_entities(), ds.graph.background().size(),
              ds.split.num_tasks());
  std::printf("relations=%zu train=%zu dev=%zu test=%zu known_triplets=%zu\n", ds.graph.num_relations(),
              ds.split.train.size(), ds.split.dev.size(), ds.split.test.size(), ds.graph.num_known_triplets());
  return 0;
}

int cmd_synth(const Options& o) {
  const SyntheticConfig config =
      o.config.empty() ? SyntheticConfig{} : synthetic_config_from_json(read_json_file(o.config));
  Rng rng(o.seed);
  const SyntheticDataset data = generate_synthetic(config, rng);
  write_synthetic(data, o.out);
  std::printf("wrote %s: entities=%zu relations=%zu\n", o.out.c_str(), config.num_entities, config.num_relations);
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig config = o.config.empty() ? RunConfig{} : run_config_from_json(read_json_file(o.config));
  if (!o.data.empty() || config.data.empty()) config.data = resolve_data(o.data).string();
  if (o.no_neighbor_agg) config.model.use_neighbor_agg = false;
  if (o.no_moe) config.model.use_moe = false;
  if (o.no_local_adapt) config.model.use_local_adapt = false;
  if (o.workers) config.train.workers = o.workers;
  if (o.seed_given) config.train.seed = o.seed;
  validate(config.model);
  validate(config.train);
  const Dataset ds = load_dataset(config.data);
  const TrainOutcome run = meta_train(ds, config, fs::path(o.out));
  const TrainReport& r = run.report;
  std::printf("steps=%zu best_step=%zu best_dev_mrr=%.4f early_stopped=%s\n", r.steps_run, r.best_step,
              r.best_dev_mrr, r.early_stopped ? "true" : "false");
  if (r.test_metrics) print_metrics("test", *r.test_metrics, false);
  return 0;
}

EvalSetup setup_from_checkpoint(const Checkpoint& ckpt, const Options& o) {
  EvalSetup setup = eval_setup_from_meta(ckpt.meta);
  if (o.shots) setup.shots = o.shots;
  return setup;
}

const std::vector<TaskSource>& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "test") return ds.split.test;
  if (name == "dev") return ds.split.dev;
  if (name == "train") return ds.split.train;
  fail(ErrorKind::kConfig, "--split must be train, dev or test");
}

int cmd_eval(const Options& o) {
  const Dataset ds = load_dataset(resolve_data(o.data));
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const EvalSetup setup = setup_from_checkpoint(ckpt, o);
  const auto& tasks = pick_split(ds, o.split);
  if (tasks.empty()) fail(ErrorKind::kValidation, "the " + o.split + " split has no tasks");
  const EvalOutput out = meta_test(ds, tasks, ckpt.params, setup, o.workers ? o.workers : 1);
  const fs::path path = o.out.empty() ? fs::path(o.ckpt).parent_path() / "metrics.json" : fs::path(o.out);
  write_text(path, to_json(out.metrics, o.breakdown).dump(2) + "\n");
  print_metrics(o.split.c_str(), out.metrics, o.breakdown);
  return 0;
}

int cmd_gradcheck(const Options& o) {
  if (o.dim < 1 || o.dim > 8) fail(ErrorKind::kConfig, "--dim must lie in [1, 8]");
  if (!(o.tol > 0.0)) fail(ErrorKind::kConfig, "--tol must be positive");
  SyntheticConfig sc;
  sc.num_entities = 24;
  sc.num_relations = 4;
  sc.dev_relations = 1;
  sc.test_relations = 1;
  sc.triplets_per_relation = 8;
  sc.background_relations = 2;
  sc.background_triplets_per_relation = 24;
  sc.latent_dim = std::min<std::size_t>(o.dim, 2);
  sc.embedding_dim = o.dim;
  sc.tail_pool = 6;
  Rng rng(o.seed);
  const Dataset ds = build_dataset(generate_synthetic(sc, rng).raw);

  ModelConfig m;
  m.embed_dim = o.dim;
  m.num_experts = 4;
  m.top_n = 2;
  m.expert_hidden = 5;
  m.gate_hidden = 5;
  m.neighbor_cap = 4;
  m.inner_lr = 0.05;
  m.inner_steps = 2;
  m.negatives_per_positive = 2;
  m.meta_gradient = MetaGradient::kExact;
  ModelCheckOptions opts;
  opts.shots = 2;
  opts.queries = 3;
  opts.seed = o.seed;
  opts.check.tolerance = o.tol;
  const ModelCheckResult r = check_model_gradients(ds, m, opts);
  std::printf("query_loss=%.6g tolerance=%g\n", r.loss, o.tol);
  for (const auto& g : r.report.groups) {
    std::printf("%-22s coords=%-4zu max_rel_err=%.3e%s\n", g.name.c_str(), g.coords_checked, g.max_relative_error,
                g.max_relative_error <= o.tol ? "" : "  FAIL");
  }
  std::printf("max_rel_err=%.3e %s\n", r.report.max_relative_error(), r.report.passed ? "PASS" : "FAIL");
  return r.report.passed ? 0 : 2;
}

int cmd_gates(const Options& o) {
  const fs::path dir = resolve_data(o.data);
  const Dataset ds = load_dataset(dir);
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  const EvalSetup setup = setup_from_checkpoint(ckpt, o);
  if (!setup.model.use_moe) fail(ErrorKind::kConfig, "checkpoint was trained without the expert mixture");

  std::vector<TaskSource> tasks = ds.split.test;
  if (o.all_relations) {
    tasks = ds.split.train;
    tasks.insert(tasks.end(), ds.split.dev.begin(), ds.split.dev.end());
    tasks.insert(tasks.end(), ds.split.test.begin(), ds.split.test.end());
  }
  const EvalOutput out = meta_test(ds, tasks, ckpt.params, setup, o.workers ? o.workers : 1);
  write_gates_csv(o.out, out.gates);
  std::printf("wrote %zu gate profiles over %zu experts to %s\n", out.gates.size(), setup.model.num_experts,
              o.out.c_str());

  const auto labels = read_cluster_labels(dir);
  if (!labels.empty()) {
    const ClusterSimilarity s = cluster_similarity(out.gates, labels);
    std::printf("cosine intra=%.4f (%zu pairs) inter=%.4f (%zu pairs) intra>inter=%s\n", s.intra, s.intra_pairs,
                s.inter, s.inter_pairs, s.intra > s.inter ? "yes" : "no");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot relational learning with a mixture of experts and task-local adaptation"};
  app.require_subcommand(1);
  Options o;

  auto* validate_cmd = app.add_subcommand("validate", "Load and check a dataset directory");
  validate_cmd->add_option("--data", o.data, "dataset directory (default $MOEMETA_DATA_ROOT)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", o.config, "synthetic config JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", o.out, "output directory")->required();
  synth->add_option("--seed", o.seed, "generator seed");

  auto* train = app.add_subcommand("train", "Meta-train and write a run directory");
  train->add_option("--data", o.data, "dataset directory (overrides the config)");
  train->add_option("--config", o.config, "run config JSON")->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "run directory")->required();
  train->add_flag("--no-neighbor-agg", o.no_neighbor_agg, "use raw entity embeddings");
  train->add_flag("--no-moe", o.no_moe, "single MLP relation learner");
  train->add_flag("--no-local-adapt", o.no_local_adapt, "skip projection and inner adaptation");
  train->add_option("--workers", o.workers, "task-level worker threads");
  train->add_option("--seed", o.seed, "run seed (overrides the config)")->each([&](const std::string&) {
    o.seed_given = true;
  });

  auto* eval = app.add_subcommand("eval", "Meta-test a checkpoint");
  eval->add_option("--data", o.data, "dataset directory");
  eval->add_option("--ckpt", o.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--k", o.shots, "support size (default: the training value)");
  eval->add_flag("--breakdown", o.breakdown, "per-category metrics");
  eval->add_option("--split", o.split, "train, dev or test");
  eval->add_option("--out", o.out, "metrics file (default: metrics.json beside the checkpoint)");
  eval->add_option("--workers", o.workers, "task-level worker threads");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the episode gradient");
  gradcheck->add_option("--dim", o.dim, "embedding dimension, 1..8");
  gradcheck->add_option("--seed", o.seed, "seed");
  gradcheck->add_option("--tol", o.tol, "maximum relative error");

  auto* gates = app.add_subcommand("gates", "Export per-relation gate profiles");
  gates->add_option("--data", o.data, "dataset directory");
  gates->add_option("--ckpt", o.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  gates->add_option("--out", o.out, "CSV path")->required();
  gates->add_option("--k", o.shots, "support size (default: the training value)");
  gates->add_flag("--all", o.all_relations, "every task relation, not only the test split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*validate_cmd) return cmd_validate(o);
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*gradcheck) return cmd_gradcheck(o);
    if (*gates) return cmd_gates(o);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
