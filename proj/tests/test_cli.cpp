#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const fs::path log = fs::temp_directory_path() / ("moemeta_cli_" + std::to_string(++counter) + ".log");
  const std::string cmd = env + (env.empty() ? "" : " ") + MOEMETA_BIN + std::string(" ") + args + " > " +
                          log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::read_file(log);
  fs::remove(log);
  return r;
}

bool contains(const std::string& s, const std::string& what) { return s.find(what) != std::string::npos; }

// A small synthetic dataset, generated once through the CLI.
const fs::path& small_data() {
  static const fs::path dir = [] {
    const auto root = testing::temp_dir("cli_data");
    const json config{{"num_entities", 60},
                      {"num_relations", 8},
                      {"dev_relations", 2},
                      {"test_relations", 2},
                      {"triplets_per_relation", 14},
                      {"background_relations", 3},
                      {"background_triplets_per_relation", 60},
                      {"embedding_dim", 8},
                      {"tail_pool", 10}};
    testing::write_file(root / "syn.json", config.dump());
    const Run r = run("synth --config " + (root / "syn.json").string() + " --out " + (root / "data").string() +
                      " --seed 3");
    REQUIRE(r.code == 0);
    return root / "data";
  }();
  return dir;
}

fs::path write_run_config(const fs::path& dir) {
  const json config{{"embed_dim", 8},   {"num_experts", 6},  {"top_n", 2},        {"expert_hidden", 8},
                    {"gate_hidden", 8}, {"neighbor_cap", 6}, {"inner_lr", 0.05},  {"shots", 3},
                    {"query_batch", 8}, {"max_steps", 40},   {"eval_every", 20}, {"outer_lr", 0.005}};
  testing::write_file(dir / "run.json", config.dump());
  return dir / "run.json";
}

// Trained once; shared by the eval and gates cases.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const auto root = testing::temp_dir("cli_train");
    const Run r = run("train --data " + small_data().string() + " --config " + write_run_config(root).string() +
                      " --out " + (root / "run").string() + " --seed 4");
    INFO(r.out);
    REQUIRE(r.code == 0);
    return root / "run";
  }();
  return dir;
}

}  // namespace

TEST_CASE("validate prints counts for a synthetic dataset") {
  const Run r = run("validate --data " + small_data().string());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "entities=60 triplets=180 tasks=8"));
}

TEST_CASE("validate falls back to the data root variable") {
  const Run r = run("validate", "MOEMETA_DATA_ROOT=" + small_data().string());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "entities=60"));
}

TEST_CASE("validate names a missing file") {
  const auto dir = testing::temp_dir("cli_missing");
  fs::copy(small_data(), dir / "data");
  fs::remove(dir / "data" / "rel2candidates.json");
  const Run r = run("validate --data " + (dir / "data").string());
  CHECK(r.code == 1);
  CHECK(contains(r.out, "rel2candidates.json"));
}

TEST_CASE("synth is byte-deterministic") {
  const auto dir = testing::temp_dir("cli_synth");
  REQUIRE(run("synth --out " + (dir / "a").string() + " --seed 8").code == 0);
  REQUIRE(run("synth --out " + (dir / "b").string() + " --seed 8").code == 0);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    ++files;
    INFO(entry.path().filename());
    CHECK(testing::read_file(entry.path()) == testing::read_file(dir / "b" / entry.path().filename()));
  }
  CHECK(files >= 6);
  const Run v = run("validate --data " + (dir / "a").string());
  CHECK(v.code == 0);
  CHECK(contains(v.out, "entities=200"));
}

TEST_CASE("synth rejects more clusters than relations") {
  const auto dir = testing::temp_dir("cli_synth_bad");
  testing::write_file(dir / "bad.json", json{{"num_clusters", 9}, {"num_relations", 8}}.dump());
  const Run r = run("synth --config " + (dir / "bad.json").string() + " --out " + (dir / "x").string());
  CHECK(r.code == 1);
}

TEST_CASE("train writes the run directory") {
  const fs::path& dir = trained_run();
  for (const char* f : {"best.ckpt", "last.ckpt", "report.json", "config.json", "log.tsv"}) {
    CHECK(fs::exists(dir / f));
  }
  const json config = json::parse(testing::read_file(dir / "config.json"));
  CHECK(config["seed"] == 4);
  CHECK(config["data"] == small_data().string());
  CHECK(config["num_experts"] == 6);
  // defaults are materialized
  CHECK(config.contains("patience"));
  CHECK(config.contains("margin"));
}

TEST_CASE("train rejects an unknown config key") {
  const auto dir = testing::temp_dir("cli_bad_config");
  testing::write_file(dir / "run.json", json{{"num_expert", 3}}.dump());
  const Run r = run("train --data " + small_data().string() + " --config " + (dir / "run.json").string() +
                    " --out " + (dir / "run").string());
  CHECK(r.code == 1);
  CHECK(contains(r.out, "num_expert"));
}

TEST_CASE("eval reproduces the training report and breaks down by category") {
  const fs::path& dir = trained_run();
  const json report = json::parse(testing::read_file(dir / "report.json"));
  const Run r = run("eval --data " + small_data().string() + " --ckpt " + (dir / "best.ckpt").string() +
                    " --breakdown");
  INFO(r.out);
  REQUIRE(r.code == 0);
  const json metrics = json::parse(testing::read_file(dir / "metrics.json"));
  CHECK(metrics["mrr"] == report["test_metrics"]["mrr"]);
  CHECK(metrics["hits@10"] == report["test_metrics"]["hits@10"]);
  REQUIRE(metrics.contains("categories"));
  double weighted = 0.0;
  double total = 0.0;
  for (const auto& [name, m] : metrics["categories"].items()) {
    weighted += m["mrr"].get<double>() * m["queries"].get<double>();
    total += m["queries"].get<double>();
  }
  CHECK(total == metrics["queries"].get<double>());
  CHECK(std::abs(weighted / total - metrics["mrr"].get<double>()) < 1e-12);

  const Run all = run("eval --data " + small_data().string() + " --ckpt " + (dir / "best.ckpt").string() +
                      " --breakdown --split train --out " + (dir / "train_metrics.json").string());
  CHECK(all.code == 0);
  CHECK(fs::exists(dir / "train_metrics.json"));
}

TEST_CASE("eval breakdown lists planted N-1 relations") {
  const auto root = testing::temp_dir("cli_n1");
  const json syn{{"num_entities", 60},
                 {"num_relations", 8},
                 {"dev_relations", 2},
                 {"test_relations", 4},
                 {"triplets_per_relation", 14},
                 {"background_relations", 3},
                 {"background_triplets_per_relation", 60},
                 {"embedding_dim", 8},
                 {"tail_pool", 6},
                 {"cardinality_profile", {"N-1"}}};
  testing::write_file(root / "syn.json", syn.dump());
  REQUIRE(run("synth --config " + (root / "syn.json").string() + " --out " + (root / "data").string()).code == 0);
  json config = json::parse(testing::read_file(write_run_config(root)));
  config["max_steps"] = 5;
  config["eval_every"] = 5;
  testing::write_file(root / "run.json", config.dump());
  REQUIRE(run("train --data " + (root / "data").string() + " --config " + (root / "run.json").string() + " --out " +
              (root / "run").string())
              .code == 0);
  const Run r = run("eval --ckpt " + (root / "run" / "best.ckpt").string() + " --breakdown --data " +
                    (root / "data").string());
  REQUIRE(r.code == 0);
  const json metrics = json::parse(testing::read_file(root / "run" / "metrics.json"));
  CHECK(metrics["categories"].contains("N-1"));
}

TEST_CASE("gradcheck passes by default and fails an impossible tolerance") {
  const Run ok = run("gradcheck");
  CHECK(ok.code == 0);
  CHECK(contains(ok.out, "PASS"));
  CHECK(contains(ok.out, "eta.head"));
  const Run strict = run("gradcheck --tol 1e-12");
  CHECK(strict.code == 2);
  CHECK(contains(strict.out, "FAIL"));
  CHECK(run("gradcheck --dim 1").code == 0);
  CHECK(run("gradcheck --dim 9").code == 1);
}

TEST_CASE("gates export has one column per expert and sparse rows") {
  const fs::path& dir = trained_run();
  const auto csv_path = dir / "gates.csv";
  const Run r = run("gates --data " + small_data().string() + " --ckpt " + (dir / "best.ckpt").string() + " --out " +
                    csv_path.string());
  INFO(r.out);
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "intra="));
  std::istringstream in(testing::read_file(csv_path));
  std::string line;
  std::getline(in, line);
  CHECK(std::count(line.begin(), line.end(), ',') == 6);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::istringstream fields(line);
    std::string cell;
    std::getline(fields, cell, ',');
    std::size_t nonzero = 0, columns = 0;
    while (std::getline(fields, cell, ',')) {
      ++columns;
      if (std::stod(cell) != 0.0) ++nonzero;
    }
    CHECK(columns == 6);
    CHECK(nonzero <= 2 * 3);  // N * K
  }
  CHECK(rows == 2);
}

TEST_CASE("unknown subcommands and flags exit with 1") {
  CHECK(run("frobnicate").code == 1);
  CHECK(run("validate --bogus").code == 1);
}
