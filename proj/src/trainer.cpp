#include "moemeta/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "moemeta/checkpoint.hpp"
#include "moemeta/error.hpp"
#include "moemeta/rng.hpp"

namespace moemeta {

using nlohmann::json;

namespace {

// Seed streams of a run.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kNeighborStream = 2;
constexpr std::uint64_t kTaskStream = 3;
constexpr std::uint64_t kEvalStream = 4;

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// (by index) is rethrown after all threads join.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kLoad, "cannot write " + path.string());
  f << text;
}

// Encodings of the entities one evaluation episode touches.
class EpisodeEncodings {
 public:
  EpisodeEncodings(const MoEMeta& net, const NeighborCache& cache) : net_(net), cache_(cache) {}

  std::size_t slot(EntityId e) {
    auto [it, inserted] = slot_of_.emplace(e, encodings_.size());
    if (inserted) encodings_.push_back(net_.encode_entity(e, cache_.get(e)).value);
    return it->second;
  }
  std::span<const double> operator[](std::size_t s) const { return encodings_[s]; }
  EncodingTable table() const {
    EncodingTable t;
    for (const auto& v : encodings_) t.push_back(v);
    return t;
  }

 private:
  const MoEMeta& net_;
  const NeighborCache& cache_;
  std::vector<std::vector<double>> encodings_;
  std::unordered_map<EntityId, std::size_t> slot_of_;
};

struct TaskEval {
  std::vector<RankResult> ranks;
  std::optional<GateProfile> gate;
};

TaskEval evaluate_task(const MoEMeta& net, const KnowledgeGraph& graph, const NeighborCache& cache,
                       const TaskSource& source, const EvalSetup& setup) {
  const ModelConfig& model = setup.model;
  const Task task = make_eval_task(graph, source, setup.shots);
  TaskEval out;
  if (task.support.empty()) return out;

  EpisodeEncodings enc(net, cache);
  Rng rng(derive_seed(derive_seed(setup.seed, kEvalStream), source.relation));
  std::vector<HingeTerm> support_terms;
  for (const auto& p : task.support) {
    const std::size_t h = enc.slot(p.head);
    const std::size_t t = enc.slot(p.tail);
    for (std::size_t k = 0; k < model.negatives_per_positive; ++k) {
      support_terms.push_back({h, t, enc.slot(sample_negative(graph, p.head, task.relation, rng))});
    }
  }
  std::vector<std::span<const double>> heads;
  std::vector<std::span<const double>> tails;
  for (const auto& p : task.support) {
    heads.push_back(enc[enc.slot(p.head)]);
    tails.push_back(enc[enc.slot(p.tail)]);
  }
  const RelationMeta meta = net.relation_meta(heads, tails);
  if (model.use_moe) out.gate = GateProfile{graph.relation_name(task.relation), mean_gate_row(meta.gate_weights)};

  const Eta eta0 = initial_eta(model, setup.seed, source.relation);
  const AdaptState state =
      net.inner_adapt(enc.table(), support_terms, meta.relation, eta0, model.test_inner_steps);

  std::vector<std::size_t> candidate_slots;
  for (EntityId c : task.candidates) candidate_slots.push_back(enc.slot(c));
  std::vector<ScoredCandidate> scored(task.candidates.size());
  for (std::size_t q = 0; q < task.query.size(); ++q) {
    const auto head = enc[enc.slot(task.query[q].head)];
    for (std::size_t i = 0; i < task.candidates.size(); ++i) {
      scored[i] = {task.candidates[i], net.score_adapted(state, head, enc[candidate_slots[i]])};
    }
    RankResult r = rank_candidates(scored, task.query[q].tail, q);
    r.relation = task.relation;
    out.ranks.push_back(r);
  }
  return out;
}

// Type check of a JSON override against the default value it replaces.
void check_type(const std::string& key, const json& given, const json& reference) {
  bool ok = true;
  if (reference.is_boolean()) {
    ok = given.is_boolean();
  } else if (reference.is_string()) {
    ok = given.is_string();
  } else if (reference.is_number_unsigned()) {
    // literals built in code are signed even when non-negative
    ok = given.is_number_unsigned() || (given.is_number_integer() && given.get<std::int64_t>() >= 0);
  } else if (reference.is_number()) {
    ok = given.is_number();
  }
  if (!ok) fail(ErrorKind::kConfig, "config key '" + key + "' has the wrong type: " + given.dump());
}

}  // namespace

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "train config: " + what);
  };
  require(c.meta_batch_tasks >= 1, "meta_batch_tasks must be at least 1");
  require(c.query_batch >= 1, "query_batch must be at least 1");
  require(c.shots >= 1, "shots must be at least 1");
  require(c.eval_every >= 1, "eval_every must be at least 1");
  require(c.max_steps == 0 || c.eval_every <= c.max_steps, "eval_every must not exceed max_steps");
  require(c.patience >= 1, "patience must be at least 1");
  require(c.adam.learning_rate > 0.0, "outer_lr must be positive");
  require(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0 && c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0,
          "Adam betas must lie in [0, 1)");
  require(c.adam.epsilon > 0.0, "adam_epsilon must be positive");
  require(c.workers >= 1, "workers must be at least 1");
}

json to_json(const RunConfig& c) {
  json doc = to_json(c.model);
  const TrainConfig& t = c.train;
  doc["data"] = c.data;
  doc["meta_batch_tasks"] = t.meta_batch_tasks;
  doc["query_batch"] = t.query_batch;
  doc["shots"] = t.shots;
  doc["max_steps"] = t.max_steps;
  doc["eval_every"] = t.eval_every;
  doc["patience"] = t.patience;
  doc["outer_lr"] = t.adam.learning_rate;
  doc["adam_beta1"] = t.adam.beta1;
  doc["adam_beta2"] = t.adam.beta2;
  doc["adam_epsilon"] = t.adam.epsilon;
  doc["seed"] = t.seed;
  doc["workers"] = t.workers;
  return doc;
}

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::kConfig, "run config must be a JSON object");
  const json reference = to_json(RunConfig{});
  for (const auto& [key, value] : doc.items()) {
    if (!reference.contains(key)) fail(ErrorKind::kConfig, "unknown config key '" + key + "'");
    check_type(key, value, reference.at(key));
  }
  RunConfig c;
  apply_model_json(doc, c.model);
  auto get = [&](const char* key, auto& field) {
    if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
  };
  TrainConfig& t = c.train;
  get("data", c.data);
  get("meta_batch_tasks", t.meta_batch_tasks);
  get("query_batch", t.query_batch);
  get("shots", t.shots);
  get("max_steps", t.max_steps);
  get("eval_every", t.eval_every);
  get("patience", t.patience);
  get("outer_lr", t.adam.learning_rate);
  get("adam_beta1", t.adam.beta1);
  get("adam_beta2", t.adam.beta2);
  get("adam_epsilon", t.adam.epsilon);
  get("seed", t.seed);
  get("workers", t.workers);
  validate(c.model);
  validate(c.train);
  return c;
}

NeighborCache make_neighbor_cache(const KnowledgeGraph& graph, const ModelConfig& model, std::uint64_t seed) {
  return NeighborCache(graph, model.neighbor_cap, derive_seed(seed, kNeighborStream));
}

Eta initial_eta(const ModelConfig& model, std::uint64_t seed, std::uint64_t stream) {
  if (model.eta_init == EtaInit::kZero) return Eta::zeros(model.embed_dim);
  Rng rng(derive_seed(derive_seed(seed, kEvalStream + 1), stream));
  return Eta::gaussian(model.embed_dim, model.eta_init_std, rng);
}

std::map<RelationId, RelationCategory> task_categories(const Dataset& dataset) {
  std::map<RelationId, RelationCategory> out;
  for (const auto* part : {&dataset.split.train, &dataset.split.dev, &dataset.split.test}) {
    for (const auto& source : *part) out[source.relation] = classify_relation(dataset.graph, source).category;
  }
  return out;
}

EvalOutput meta_test(const Dataset& dataset, const std::vector<TaskSource>& tasks, const ParamSet& params,
                     const EvalSetup& setup, std::size_t workers) {
  const MoEMeta net(setup.model, params);
  if (params[net.entity_group()].value.rows() != dataset.graph.num_entities() ||
      params[net.relation_group()].value.rows() != dataset.graph.num_relation_slots()) {
    fail(ErrorKind::kLoad, "checkpoint embedding tables do not match the dataset vocabulary");
  }
  const std::uint64_t before = params.checksum();
  const NeighborCache cache = make_neighbor_cache(dataset.graph, setup.model, setup.seed);
  std::vector<TaskEval> per_task(tasks.size());
  parallel_for(tasks.size(), workers,
               [&](std::size_t i) { per_task[i] = evaluate_task(net, dataset.graph, cache, tasks[i], setup); });
  if (params.checksum() != before) fail(ErrorKind::kDeterminism, "parameters changed during meta-test");

  EvalOutput out;
  for (auto& t : per_task) {
    for (auto r : t.ranks) {
      r.query = out.ranks.size();
      out.ranks.push_back(r);
    }
    if (t.gate) out.gates.push_back(std::move(*t.gate));
  }
  out.metrics = aggregate_metrics(out.ranks, task_categories(dataset));
  return out;
}

json checkpoint_meta(const EvalSetup& setup, std::size_t step) {
  return json{{"model", to_json(setup.model)}, {"shots", setup.shots}, {"seed", setup.seed}, {"step", step}};
}

EvalSetup eval_setup_from_meta(const json& meta) {
  if (!meta.contains("model") || !meta.contains("shots") || !meta.contains("seed")) {
    fail(ErrorKind::kLoad, "checkpoint metadata lacks the model configuration");
  }
  EvalSetup setup;
  try {
    apply_model_json(meta.at("model"), setup.model);
    setup.shots = meta.at("shots").get<std::size_t>();
    setup.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const Error& e) {
    fail(ErrorKind::kLoad, std::string("checkpoint metadata: ") + e.what());
  } catch (const json::exception& e) {
    fail(ErrorKind::kLoad, std::string("checkpoint metadata: ") + e.what());
  }
  return setup;
}

json to_json(const TrainReport& r) {
  json dev = json::array();
  for (const auto& p : r.dev_history) dev.push_back(json{{"step", p.step}, {"mrr", p.mrr}});
  json doc{{"query_loss", r.query_loss}, {"dev_history", dev},       {"best_step", r.best_step},
           {"best_dev_mrr", r.best_dev_mrr}, {"steps_run", r.steps_run}, {"early_stopped", r.early_stopped},
           {"skipped_tasks", r.skipped_tasks}};
  doc["test_metrics"] = r.test_metrics ? to_json(*r.test_metrics, true) : json(nullptr);
  return doc;
}

TrainOutcome meta_train(const Dataset& dataset, const RunConfig& config,
                        const std::optional<std::filesystem::path>& run_dir) {
  const ModelConfig& model = config.model;
  const TrainConfig& train = config.train;
  validate(model);
  validate(train);
  const KnowledgeGraph& graph = dataset.graph;
  if (dataset.split.train.empty()) fail(ErrorKind::kConfig, "dataset has no train tasks");
  if (run_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*run_dir, ec);
    if (ec) fail(ErrorKind::kLoad, "cannot create run directory " + run_dir->string() + ": " + ec.message());
    write_file(*run_dir / "config.json", to_json(config).dump(2) + "\n");
  }

  Rng init_rng(derive_seed(train.seed, kInitStream));
  TrainOutcome out;
  ParamSet params = create_params(model, graph, init_rng);
  const MoEMeta net(model, params);
  const NeighborCache cache = make_neighbor_cache(graph, model, train.seed);
  AdamState adam = AdamState::for_params(params, train.adam);
  const EvalSetup setup{model, train.shots, train.seed};
  TrainReport& report = out.report;

  const bool has_dev = !dataset.split.dev.empty();
  std::size_t since_best = 0;
  auto evaluate_dev = [&](std::size_t step) {
    const double mrr = meta_test(dataset, dataset.split.dev, params, setup, train.workers).metrics.overall.mrr;
    report.dev_history.push_back({step, mrr});
    if (report.dev_history.size() == 1 || mrr > report.best_dev_mrr) {
      report.best_dev_mrr = mrr;
      report.best_step = step;
      out.best = params;
      since_best = 0;
    } else {
      ++since_best;
    }
  };
  if (has_dev) evaluate_dev(0);

  const std::size_t batch = train.meta_batch_tasks;
  std::vector<GradBuffer> buffers;
  for (std::size_t i = 0; i < batch; ++i) buffers.emplace_back(params, net.row_sparse_groups());
  std::vector<TaskResult> results(batch);
  std::vector<std::size_t> query_terms(batch);
  const std::uint64_t task_seed = derive_seed(train.seed, kTaskStream);
  std::size_t consecutive_skips = 0;

  for (std::size_t step = 1; step <= train.max_steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    parallel_for(batch, train.workers, [&](std::size_t i) {
      Rng rng(derive_seed(task_seed, (step - 1) * batch + i));
      const Task task = sample_task(graph, dataset.split.train, train.shots, train.query_batch, rng);
      const TaskExample example = attach_negatives(graph, task, model.negatives_per_positive, rng);
      const Eta eta0 = model.eta_init == EtaInit::kZero ? Eta::zeros(model.embed_dim)
                                                        : Eta::gaussian(model.embed_dim, model.eta_init_std, rng);
      results[i] = net.run_task(example, cache, eta0, model.inner_steps, &buffers[i]);
      query_terms[i] = example.query_negatives.size();
    });

    double loss = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < batch; ++i) {
      if (!results[i].finite) {
        buffers[i].clear();
        ++report.skipped_tasks;
        if (++consecutive_skips > 10) {
          fail(ErrorKind::kNumeric, "aborting: more than 10 consecutive tasks produced non-finite losses or "
                                    "gradients (step " + std::to_string(step) + ")");
        }
        continue;
      }
      consecutive_skips = 0;
      buffers[i].merge_into(params);
      loss += query_terms[i] ? results[i].query_loss / static_cast<double>(query_terms[i]) : 0.0;
      ++used;
    }
    if (used > 0) adam_step(params, adam);
    params.zero_grads();
    report.query_loss.push_back(used ? loss / static_cast<double>(used) : 0.0);
    report.steps_run = step;
    report.step_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());

    if (has_dev && (step % train.eval_every == 0 || step == train.max_steps)) {
      evaluate_dev(step);
      if (since_best >= train.patience) {
        report.early_stopped = true;
        break;
      }
    }
  }

  out.last = params;
  out.adam = adam;
  if (!has_dev) {
    out.best = params;
    report.best_step = report.steps_run;
  }
  if (!dataset.split.test.empty()) {
    report.test_metrics = meta_test(dataset, dataset.split.test, out.best, setup, train.workers).metrics;
  }

  if (run_dir) {
    save_checkpoint(*run_dir / "best.ckpt", out.best, nullptr, checkpoint_meta(setup, report.best_step));
    save_checkpoint(*run_dir / "last.ckpt", out.last, &out.adam, checkpoint_meta(setup, report.steps_run));
    write_file(*run_dir / "report.json", to_json(report).dump(2) + "\n");
    std::string log = "step\tquery_loss\tdev_mrr\n";
    std::size_t dev_i = 0;
    for (std::size_t step = 0; step <= report.steps_run; ++step) {
      const bool has_loss = step > 0;
      const bool has_mrr = dev_i < report.dev_history.size() && report.dev_history[dev_i].step == step;
      if (!has_loss && !has_mrr) continue;
      log += std::to_string(step) + "\t" + (has_loss ? format_double(report.query_loss[step - 1]) : "") + "\t" +
             (has_mrr ? format_double(report.dev_history[dev_i++].mrr) : "") + "\n";
    }
    write_file(*run_dir / "log.tsv", log);
    write_file(*run_dir / "timing.json", json{{"step_seconds", report.step_seconds}}.dump() + "\n");
  }
  return out;
}

}  // namespace moemeta
