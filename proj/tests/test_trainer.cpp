#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "moemeta/checkpoint.hpp"
#include "moemeta/synthetic.hpp"
#include "moemeta/trainer.hpp"
#include "support.hpp"

using namespace moemeta;
using nlohmann::json;

namespace {

const Dataset& world() {
  static const Dataset ds = [] {
    SyntheticConfig sc;
    sc.num_entities = 40;
    sc.num_relations = 6;
    sc.dev_relations = 2;
    sc.test_relations = 2;
    sc.triplets_per_relation = 12;
    sc.background_relations = 3;
    sc.background_triplets_per_relation = 40;
    sc.latent_dim = 2;
    sc.embedding_dim = 4;
    sc.tail_pool = 8;
    Rng rng(5);
    return build_dataset(generate_synthetic(sc, rng).raw);
  }();
  return ds;
}

RunConfig small_run() {
  RunConfig c;
  c.model.embed_dim = 4;
  c.model.num_experts = 4;
  c.model.top_n = 2;
  c.model.expert_hidden = 6;
  c.model.gate_hidden = 6;
  c.model.neighbor_cap = 5;
  c.model.inner_lr = 0.05;
  c.train.shots = 2;
  c.train.query_batch = 4;
  c.train.max_steps = 30;
  c.train.eval_every = 10;
  c.train.adam.learning_rate = 0.01;
  c.train.seed = 9;
  return c;
}

EvalSetup setup_of(const RunConfig& c) { return EvalSetup{c.model, c.train.shots, c.train.seed}; }

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(validate(t));
  t.eval_every = 3000;
  CHECK_ERROR_KIND(validate(t), ErrorKind::kConfig);
  t = TrainConfig{};
  t.meta_batch_tasks = 0;
  CHECK_ERROR_KIND(validate(t), ErrorKind::kConfig);
  t = TrainConfig{};
  t.query_batch = 0;
  CHECK_ERROR_KIND(validate(t), ErrorKind::kConfig);
}

TEST_CASE("run config json round trip and unknown keys") {
  RunConfig c = small_run();
  c.data = "some/dir";
  c.model.use_moe = false;
  const json doc = to_json(c);
  const RunConfig back = run_config_from_json(doc);
  CHECK(to_json(back) == doc);
  CHECK(back.data == "some/dir");
  CHECK_FALSE(back.model.use_moe);

  json bad = doc;
  bad["learning_rat"] = 0.1;
  const auto msg = testing::error_message([&] { run_config_from_json(bad); });
  CHECK(msg.find("learning_rat") != std::string::npos);
  CHECK_ERROR_KIND(run_config_from_json(bad), ErrorKind::kConfig);
  CHECK_ERROR_KIND(run_config_from_json(json{{"shots", "five"}}), ErrorKind::kConfig);
  CHECK_ERROR_KIND(run_config_from_json(json{{"use_moe", 1}}), ErrorKind::kConfig);
  CHECK_ERROR_KIND(run_config_from_json(json::array()), ErrorKind::kConfig);
  CHECK(run_config_from_json(json::object()).train.shots == 5);
  // signed literals from code are fine while non-negative
  CHECK(run_config_from_json(json{{"shots", 3}, {"embed_dim", 16}}).model.embed_dim == 16);
  CHECK_ERROR_KIND(run_config_from_json(json{{"shots", -3}}), ErrorKind::kConfig);
}

TEST_CASE("zero steps returns the initialization") {
  RunConfig c = small_run();
  c.train.max_steps = 0;
  const TrainOutcome out = meta_train(world(), c);
  Rng rng(derive_seed(c.train.seed, 1));
  const ParamSet init = create_params(c.model, world().graph, rng);
  CHECK(out.best.checksum() == init.checksum());
  CHECK(out.last.checksum() == init.checksum());
  CHECK(out.report.steps_run == 0);
  CHECK(out.report.best_step == 0);
  CHECK(out.report.query_loss.empty());
  CHECK(out.adam.step == 0);
  REQUIRE(out.report.dev_history.size() == 1);
}

TEST_CASE("training moves parameters and leaves gradients clean") {
  const RunConfig c = small_run();
  const TrainOutcome out = meta_train(world(), c);
  CHECK(out.report.steps_run == 30);
  CHECK(out.report.query_loss.size() == 30);
  CHECK(out.adam.step == 30);
  CHECK(out.last.grads_all_zero());
  CHECK(out.best.grads_all_zero());
  Rng rng(derive_seed(c.train.seed, 1));
  CHECK(out.last.checksum() != create_params(c.model, world().graph, rng).checksum());
  // dev evaluations at 0, 10, 20, 30
  REQUIRE(out.report.dev_history.size() == 4);
  CHECK(out.report.dev_history.back().step == 30);
  double best = -1.0;
  std::size_t best_step = 0;
  for (const auto& p : out.report.dev_history) {
    if (p.mrr > best) {
      best = p.mrr;
      best_step = p.step;
    }
  }
  CHECK(out.report.best_dev_mrr == best);
  CHECK(out.report.best_step == best_step);
  REQUIRE(out.report.test_metrics.has_value());
  CHECK(out.report.test_metrics->overall.queries > 0);
}

TEST_CASE("same seed gives byte-identical reports and different seeds do not") {
  const auto dir_a = testing::temp_dir("train_a");
  const auto dir_b = testing::temp_dir("train_b");
  const auto dir_c = testing::temp_dir("train_c");
  RunConfig c = small_run();
  meta_train(world(), c, dir_a);
  meta_train(world(), c, dir_b);
  c.train.seed = 10;
  meta_train(world(), c, dir_c);
  const std::string a = testing::read_file(dir_a / "report.json");
  CHECK_FALSE(a.empty());
  CHECK(a == testing::read_file(dir_b / "report.json"));
  CHECK(a != testing::read_file(dir_c / "report.json"));
  CHECK(testing::read_file(dir_a / "best.ckpt") == testing::read_file(dir_b / "best.ckpt"));
  for (const char* f : {"config.json", "log.tsv", "last.ckpt", "timing.json"}) CHECK(std::filesystem::exists(dir_a / f));
  const std::string log = testing::read_file(dir_a / "log.tsv");
  CHECK(log.rfind("step\tquery_loss\tdev_mrr\n", 0) == 0);
  // the written config reproduces the run
  const RunConfig again = run_config_from_json(json::parse(testing::read_file(dir_a / "config.json")));
  CHECK(to_json(again) == to_json(small_run()));
}

TEST_CASE("worker count does not change the result") {
  RunConfig c = small_run();
  c.train.meta_batch_tasks = 3;
  c.train.max_steps = 12;
  c.train.eval_every = 6;
  c.train.workers = 1;
  const TrainOutcome one = meta_train(world(), c);
  c.train.workers = 3;
  const TrainOutcome three = meta_train(world(), c);
  CHECK(to_json(one.report) == to_json(three.report));
  CHECK(one.last.checksum() == three.last.checksum());
}

TEST_CASE("checkpoint replay reproduces the test metrics") {
  const auto dir = testing::temp_dir("train_replay");
  const RunConfig c = small_run();
  const TrainOutcome out = meta_train(world(), c, dir);
  const Checkpoint ckpt = load_checkpoint(dir / "best.ckpt");
  const EvalSetup setup = eval_setup_from_meta(ckpt.meta);
  CHECK(to_json(setup.model) == to_json(c.model));
  CHECK(setup.shots == c.train.shots);
  CHECK(setup.seed == c.train.seed);
  const auto before = ckpt.params.checksum();
  const EvalOutput eval = meta_test(world(), world().split.test, ckpt.params, setup);
  CHECK(ckpt.params.checksum() == before);
  CHECK(to_json(eval.metrics.overall) == to_json(out.report.test_metrics->overall));
  const json report = json::parse(testing::read_file(dir / "report.json"));
  CHECK(report["test_metrics"]["mrr"] == eval.metrics.overall.mrr);

  const EvalOutput parallel = meta_test(world(), world().split.test, ckpt.params, setup, 3);
  CHECK(to_json(parallel.metrics.overall) == to_json(eval.metrics.overall));
  CHECK(parallel.gates.size() == world().split.test.size());
}

TEST_CASE("meta-test rejects a checkpoint of the wrong shape") {
  const RunConfig c = small_run();
  Rng rng(1);
  const ParamSet params = create_params(c.model, world().graph, rng);
  EvalSetup setup = setup_of(c);
  setup.model.embed_dim = 5;
  CHECK_ERROR_KIND(meta_test(world(), world().split.test, params, setup), ErrorKind::kLoad);
  CHECK_ERROR_KIND(eval_setup_from_meta(json{{"nothing", 1}}), ErrorKind::kLoad);
}

TEST_CASE("single candidate gives reciprocal rank one") {
  RawDataset raw;
  raw.background = {{"a", "r", "b"}, {"b", "r", "c"}, {"c", "r", "d"}};
  raw.train_tasks["t"] = {{"a", "t", "b"}, {"b", "t", "c"}, {"c", "t", "d"}};
  raw.test_tasks["u"] = {{"a", "u", "d"}, {"b", "u", "d"}};
  raw.candidates["u"] = {"d"};
  const Dataset ds = build_dataset(raw);
  RunConfig c = small_run();
  c.model.embed_dim = 3;
  Rng rng(2);
  const ParamSet params = create_params(c.model, ds.graph, rng);
  EvalSetup setup = setup_of(c);
  setup.model.embed_dim = 3;
  setup.shots = 1;
  const EvalOutput out = meta_test(ds, ds.split.test, params, setup);
  REQUIRE(out.ranks.size() == 1);
  CHECK(out.ranks[0].rank == 1);
  CHECK(out.metrics.overall.mrr == 1.0);
}

TEST_CASE("a dataset without train tasks is a config error") {
  RawDataset raw;
  raw.background = {{"a", "r", "b"}};
  raw.test_tasks["u"] = {{"a", "u", "b"}, {"b", "u", "a"}};
  raw.candidates["u"] = {"a", "b"};
  const Dataset ds = build_dataset(raw);
  RunConfig c = small_run();
  CHECK_ERROR_KIND(meta_train(ds, c), ErrorKind::kConfig);
}

TEST_CASE("ablations train end to end") {
  for (int variant = 0; variant < 3; ++variant) {
    RunConfig c = small_run();
    c.train.max_steps = 10;
    c.train.eval_every = 5;
    c.model.use_moe = variant != 0;
    c.model.use_local_adapt = variant != 1;
    c.model.use_neighbor_agg = variant != 2;
    const TrainOutcome out = meta_train(world(), c);
    CHECK(out.report.steps_run == 10);
    for (double l : out.report.query_loss) CHECK(std::isfinite(l));
  }
}

TEST_CASE("eta initialization streams") {
  ModelConfig m;
  m.embed_dim = 6;
  const Eta zero = initial_eta(m, 1, 3);
  CHECK(zero.head == std::vector<double>(6, 0.0));
  m.eta_init = EtaInit::kGaussian;
  const Eta a = initial_eta(m, 1, 3), b = initial_eta(m, 1, 3), c = initial_eta(m, 1, 4);
  CHECK(a.head == b.head);
  CHECK(a.head != c.head);
}

TEST_CASE("task categories cover every task relation") {
  const auto cats = task_categories(world());
  CHECK(cats.size() == world().split.num_tasks());
}
