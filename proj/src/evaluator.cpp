#include "moemeta/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "moemeta/blocks.hpp"
#include "moemeta/error.hpp"

namespace moemeta {

using nlohmann::json;

RankResult rank_candidates(std::span<const ScoredCandidate> scores, EntityId true_tail, std::size_t query) {
  const ScoredCandidate* target = nullptr;
  for (const auto& c : scores) {
    if (std::isnan(c.score)) fail(ErrorKind::kEvaluation, "NaN score for candidate " + std::to_string(c.entity));
    if (c.entity == true_tail && !target) target = &c;
  }
  if (!target) {
    fail(ErrorKind::kEvaluation, "true tail " + std::to_string(true_tail) + " is not among the " +
                                     std::to_string(scores.size()) + " candidates of query " + std::to_string(query));
  }
  std::size_t ahead = 0;
  for (const auto& c : scores) {
    if (&c == target) continue;
    if (c.score <= target->score) ++ahead;
  }
  return RankResult{query, 0, ahead + 1, scores.size()};
}

Metrics compute_metrics(std::span<const RankResult> results) {
  Metrics m;
  m.queries = results.size();
  if (results.empty()) return m;
  for (const auto& r : results) {
    m.mrr += 1.0 / static_cast<double>(r.rank);
    m.hits1 += r.rank <= 1 ? 1.0 : 0.0;
    m.hits5 += r.rank <= 5 ? 1.0 : 0.0;
    m.hits10 += r.rank <= 10 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(results.size());
  m.mrr /= n;
  m.hits1 /= n;
  m.hits5 /= n;
  m.hits10 /= n;
  return m;
}

MetricsTable aggregate_metrics(std::span<const RankResult> results,
                               const std::map<RelationId, RelationCategory>& category_of) {
  MetricsTable table;
  table.overall = compute_metrics(results);
  std::map<RelationCategory, std::vector<RankResult>> groups;
  for (const auto& r : results) {
    auto it = category_of.find(r.relation);
    if (it != category_of.end()) groups[it->second].push_back(r);
  }
  for (const auto& [category, subset] : groups) table.by_category[category] = compute_metrics(subset);
  return table;
}

json to_json(const Metrics& m) {
  return json{{"queries", m.queries}, {"mrr", m.mrr}, {"hits@1", m.hits1}, {"hits@5", m.hits5}, {"hits@10", m.hits10}};
}

json to_json(const MetricsTable& table, bool breakdown) {
  json doc = to_json(table.overall);
  if (breakdown) {
    json categories = json::object();
    for (const auto& [category, m] : table.by_category) categories[category_name(category)] = to_json(m);
    doc["categories"] = categories;
  }
  return doc;
}

std::vector<double> mean_gate_row(const Tensor& gate_weights) {
  std::vector<double> mean(gate_weights.cols(), 0.0);
  if (gate_weights.rows() == 0) return mean;
  for (std::size_t r = 0; r < gate_weights.rows(); ++r) axpy(1.0, gate_weights.row(r), mean);
  for (double& x : mean) x /= static_cast<double>(gate_weights.rows());
  return mean;
}

std::string gates_csv(std::span<const GateProfile> profiles) {
  std::string out = "relation";
  const std::size_t m = profiles.empty() ? 0 : profiles.front().weights.size();
  for (std::size_t i = 0; i < m; ++i) out += ",expert_" + std::to_string(i);
  out += '\n';
  char buf[40];
  for (const auto& p : profiles) {
    if (p.weights.size() != m) fail(ErrorKind::kDimension, "gate profiles disagree on the expert count");
    out += p.relation;
    for (double w : p.weights) {
      std::snprintf(buf, sizeof buf, ",%.17g", w);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void write_gates_csv(const std::filesystem::path& path, std::span<const GateProfile> profiles) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kLoad, "cannot write " + path.string());
  f << gates_csv(profiles);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

ClusterSimilarity cluster_similarity(std::span<const GateProfile> profiles, const std::map<std::string, int>& labels) {
  ClusterSimilarity out;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    auto li = labels.find(profiles[i].relation);
    if (li == labels.end()) continue;
    for (std::size_t j = i + 1; j < profiles.size(); ++j) {
      auto lj = labels.find(profiles[j].relation);
      if (lj == labels.end()) continue;
      const double c = cosine_similarity(profiles[i].weights, profiles[j].weights);
      if (li->second == lj->second) {
        out.intra += c;
        ++out.intra_pairs;
      } else {
        out.inter += c;
        ++out.inter_pairs;
      }
    }
  }
  if (out.intra_pairs) out.intra /= static_cast<double>(out.intra_pairs);
  if (out.inter_pairs) out.inter /= static_cast<double>(out.inter_pairs);
  return out;
}

}  // namespace moemeta
