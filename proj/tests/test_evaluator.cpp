#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "moemeta/evaluator.hpp"
#include "support.hpp"

using namespace moemeta;

namespace {

std::vector<ScoredCandidate> random_scores(std::size_t n, Rng& rng, bool with_ties) {
  std::vector<ScoredCandidate> s;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = with_ties ? static_cast<double>(rng.uniform_index(5)) : rng.normal();
    s.push_back({static_cast<EntityId>(i), v});
  }
  return s;
}

// Position of the truth after a full sort that places ties ahead of it.
std::size_t sorted_rank(std::vector<ScoredCandidate> s, EntityId truth) {
  std::sort(s.begin(), s.end(), [&](const ScoredCandidate& a, const ScoredCandidate& b) {
    if (a.score != b.score) return a.score < b.score;
    return (a.entity == truth) < (b.entity == truth);
  });
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].entity == truth) return i + 1;
  }
  return 0;
}

RankResult with_rank(std::size_t rank, RelationId relation = 0) {
  RankResult r;
  r.rank = rank;
  r.relation = relation;
  r.candidates = std::max<std::size_t>(rank, 10);
  return r;
}

}  // namespace

TEST_CASE("ranking examples") {
  const std::vector<ScoredCandidate> a{{7, 0.2}, {1, 0.5}, {2, 0.9}};
  CHECK(rank_candidates(a, 7, 0).rank == 1);
  CHECK(rank_candidates(a, 7, 0).candidates == 3);
  const std::vector<ScoredCandidate> tie{{1, 0.1}, {7, 0.1}};
  CHECK(rank_candidates(tie, 7, 0).rank == 2);
  const std::vector<ScoredCandidate> single{{3, 12.0}};
  CHECK(rank_candidates(single, 3, 0).rank == 1);
}

TEST_CASE("ranking errors") {
  const std::vector<ScoredCandidate> a{{1, 0.2}, {2, 0.5}};
  CHECK_ERROR_KIND(rank_candidates(a, 9, 4), ErrorKind::kEvaluation);
  const std::vector<ScoredCandidate> nan{{1, std::nan("")}, {2, 0.5}};
  CHECK_ERROR_KIND(rank_candidates(nan, 2, 0), ErrorKind::kEvaluation);
}

TEST_CASE("rank matches a full sort") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const auto s = random_scores(50, rng, trial % 2 == 0);
    const auto truth = static_cast<EntityId>(rng.uniform_index(50));
    const RankResult r = rank_candidates(s, truth, 0);
    CHECK(r.rank == sorted_rank(s, truth));
    CHECK(r.rank >= 1);
    CHECK(r.rank <= 50);
  }
}

TEST_CASE("rank ignores candidate order and monotone transforms") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_scores(30, rng, trial % 3 == 0);
    const auto truth = static_cast<EntityId>(rng.uniform_index(30));
    const std::size_t rank = rank_candidates(s, truth, 0).rank;
    auto shuffled = s;
    for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.uniform_index(i + 1)]);
    CHECK(rank_candidates(shuffled, truth, 0).rank == rank);
    auto transformed = s;
    for (auto& c : transformed) c.score = std::exp(0.5 * c.score) + 3.0;
    CHECK(rank_candidates(transformed, truth, 0).rank == rank);
  }
}

TEST_CASE("metrics by hand") {
  const std::vector<RankResult> r{with_rank(1), with_rank(2), with_rank(4)};
  const Metrics m = compute_metrics(r);
  CHECK(m.queries == 3);
  CHECK(m.mrr == doctest::Approx((1.0 + 0.5 + 0.25) / 3).epsilon(1e-15));
  CHECK(m.hits1 == doctest::Approx(1.0 / 3));
  CHECK(m.hits5 == 1.0);
  CHECK(m.hits10 == 1.0);

  const std::vector<RankResult> ones(7, with_rank(1));
  const Metrics all = compute_metrics(ones);
  CHECK(all.mrr == 1.0);
  CHECK(all.hits1 == 1.0);
  CHECK(all.hits10 == 1.0);

  CHECK(compute_metrics({}).queries == 0);
}

TEST_CASE("metrics agree with a streaming recomputation") {
  Rng rng(3);
  std::vector<RankResult> r;
  for (int i = 0; i < 1000; ++i) r.push_back(with_rank(1 + rng.uniform_index(40)));
  const Metrics m = compute_metrics(r);
  // running means, updated one observation at a time
  double mrr = 0, h1 = 0, h5 = 0, h10 = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double n = static_cast<double>(i + 1);
    mrr += (1.0 / r[i].rank - mrr) / n;
    h1 += ((r[i].rank <= 1) - h1) / n;
    h5 += ((r[i].rank <= 5) - h5) / n;
    h10 += ((r[i].rank <= 10) - h10) / n;
  }
  CHECK(std::abs(m.mrr - mrr) < 1e-12);
  CHECK(std::abs(m.hits1 - h1) < 1e-12);
  CHECK(std::abs(m.hits5 - h5) < 1e-12);
  CHECK(std::abs(m.hits10 - h10) < 1e-12);
  CHECK(m.hits1 <= m.hits5);
  CHECK(m.hits5 <= m.hits10);
  CHECK(m.hits10 <= 1.0);
  CHECK(m.mrr > 0.0);
}

TEST_CASE("category metrics recombine into the overall numbers") {
  Rng rng(4);
  std::map<RelationId, RelationCategory> categories{{0, RelationCategory::kOneToOne},
                                                    {1, RelationCategory::kOneToMany},
                                                    {2, RelationCategory::kManyToOne},
                                                    {3, RelationCategory::kManyToMany},
                                                    {4, RelationCategory::kOneToMany}};
  std::vector<RankResult> r;
  for (int i = 0; i < 1000; ++i) r.push_back(with_rank(1 + rng.uniform_index(60), rng.uniform_index(5)));
  const MetricsTable table = aggregate_metrics(r, categories);
  CHECK(table.by_category.size() == 4);
  double weighted = 0.0;
  std::size_t total = 0;
  for (const auto& [c, m] : table.by_category) {
    weighted += m.mrr * static_cast<double>(m.queries);
    total += m.queries;
  }
  CHECK(total == 1000);
  CHECK(std::abs(weighted / total - table.overall.mrr) < 1e-12);
}

TEST_CASE("metrics json") {
  MetricsTable t;
  t.overall = compute_metrics(std::vector<RankResult>{with_rank(2)});
  t.by_category[RelationCategory::kManyToOne] = t.overall;
  const auto plain = to_json(t, false);
  CHECK(plain["mrr"] == 0.5);
  CHECK(plain["hits@1"] == 0.0);
  CHECK_FALSE(plain.contains("categories"));
  const auto broken = to_json(t, true);
  CHECK(broken["categories"]["N-1"]["queries"] == 1);
}

TEST_CASE("gate profile helpers") {
  Tensor rows = Tensor::matrix({{0.5, 0.0, 0.2}, {0.0, 0.3, 0.1}});
  const auto mean = mean_gate_row(rows);
  CHECK(mean == std::vector<double>{0.25, 0.15, 0.15000000000000002});
  Tensor one = Tensor::matrix({{0.0, 0.7, 0.1}});
  CHECK(mean_gate_row(one) == std::vector<double>{0.0, 0.7, 0.1});

  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{2, 0}) == doctest::Approx(1.0));
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 3}) == 0.0);
  CHECK(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{0, 3}) == 0.0);
}

TEST_CASE("gates csv layout") {
  const std::vector<GateProfile> p{{"r1", {0.25, 0.0, 1.0 / 3.0}}, {"r2", {0.0, 0.5, 0.0}}};
  const std::string csv = gates_csv(p);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "relation,expert_0,expert_1,expert_2");
  std::getline(in, line);
  CHECK(line.rfind("r1,0.25,0,0.33333333333333331", 0) == 0);
  CHECK(std::count(line.begin(), line.end(), ',') == 3);
  std::getline(in, line);
  CHECK(line == "r2,0,0.5,0");
  // 17 significant digits read back exactly
  CHECK(std::stod("0.33333333333333331") == 1.0 / 3.0);

  const std::vector<GateProfile> ragged{{"a", {1.0}}, {"b", {1.0, 2.0}}};
  CHECK_ERROR_KIND(gates_csv(ragged), ErrorKind::kDimension);
}

TEST_CASE("cluster similarity separates planted groups") {
  const std::vector<GateProfile> p{
      {"a1", {1.0, 0.1, 0.0}}, {"a2", {0.9, 0.0, 0.1}}, {"b1", {0.0, 0.2, 1.0}}, {"b2", {0.1, 0.0, 0.8}}, {"x", {1, 1, 1}}};
  const std::map<std::string, int> labels{{"a1", 0}, {"a2", 0}, {"b1", 1}, {"b2", 1}};
  const ClusterSimilarity s = cluster_similarity(p, labels);
  CHECK(s.intra_pairs == 2);
  CHECK(s.inter_pairs == 4);
  CHECK(s.intra > s.inter);
  const double a = cosine_similarity(p[0].weights, p[1].weights);
  const double b = cosine_similarity(p[2].weights, p[3].weights);
  CHECK(s.intra == doctest::Approx((a + b) / 2));
}
