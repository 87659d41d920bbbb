#pragma once

// Ranking metrics, per-category breakdowns and gate-profile export.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moemeta/graph.hpp"
#include "moemeta/tensor.hpp"

namespace moemeta {

struct ScoredCandidate {
  EntityId entity = 0;
  double score = 0.0;
};

struct RankResult {
  std::size_t query = 0;
  RelationId relation = 0;
  std::size_t rank = 0;  // 1-based
  std::size_t candidates = 0;
};

// rank = 1 + #{score < s*} + #{other candidates tied with s*}. Ties count
// against the true tail. Throws an evaluation error when the true tail is not
// among the candidates or a score is NaN.
RankResult rank_candidates(std::span<const ScoredCandidate> scores, EntityId true_tail, std::size_t query = 0);

struct Metrics {
  std::size_t queries = 0;
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits5 = 0.0;
  double hits10 = 0.0;
};

struct MetricsTable {
  Metrics overall;
  std::map<RelationCategory, Metrics> by_category;  // only categories with queries
};

Metrics compute_metrics(std::span<const RankResult> results);
// `category_of` maps relation ids to their category; relations missing from it
// count towards the overall table only.
MetricsTable aggregate_metrics(std::span<const RankResult> results,
                               const std::map<RelationId, RelationCategory>& category_of);

nlohmann::json to_json(const Metrics& m);
// With `breakdown`, adds a "categories" object keyed by "1-1", "1-N", ...
nlohmann::json to_json(const MetricsTable& table, bool breakdown);

struct GateProfile {
  std::string relation;
  std::vector<double> weights;  // length M
};

// Column means of a K x M gate-weight matrix.
std::vector<double> mean_gate_row(const Tensor& gate_weights);

std::string gates_csv(std::span<const GateProfile> profiles);
void write_gates_csv(const std::filesystem::path& path, std::span<const GateProfile> profiles);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct ClusterSimilarity {
  double intra = 0.0;
  double inter = 0.0;
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;
};

// Mean pairwise cosine similarity of profiles within and across clusters.
// Profiles without a label are ignored.
ClusterSimilarity cluster_similarity(std::span<const GateProfile> profiles, const std::map<std::string, int>& labels);

}  // namespace moemeta
