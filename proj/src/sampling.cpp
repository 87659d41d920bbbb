#include <algorithm>
#include <map>
#include <set>

#include "moemeta/error.hpp"
#include "moemeta/graph.hpp"

namespace moemeta {

std::vector<Neighbor> neighbors_of(const KnowledgeGraph& graph, EntityId entity, std::size_t cap, Rng& rng) {
  const auto all = graph.neighbors(entity);
  if (all.size() <= cap) return {all.begin(), all.end()};
  auto picked = rng.sample_without_replacement(all.size(), cap);
  std::sort(picked.begin(), picked.end());
  std::vector<Neighbor> out;
  out.reserve(cap);
  for (std::size_t i : picked) out.push_back(all[i]);
  return out;
}

NeighborCache::NeighborCache(const KnowledgeGraph& graph, std::size_t cap, std::uint64_t seed) : cap_(cap) {
  if (cap == 0) fail(ErrorKind::kConfig, "neighbor cap must be at least 1");
  lists_.resize(graph.num_entities());
  for (std::size_t e = 0; e < graph.num_entities(); ++e) {
    Rng rng(derive_seed(seed, e));
    lists_[e] = neighbors_of(graph, static_cast<EntityId>(e), cap, rng);
  }
}

Task sample_task(const KnowledgeGraph& graph, const std::vector<TaskSource>& partition, std::size_t shots,
                 std::size_t query_batch, Rng& rng) {
  if (shots == 0) fail(ErrorKind::kConfig, "shot count must be at least 1");
  std::vector<const TaskSource*> eligible;
  for (const auto& source : partition) {
    if (source.triplets.size() >= shots + 1) eligible.push_back(&source);
  }
  if (eligible.empty()) {
    fail(ErrorKind::kSampling, "no task relation has at least " + std::to_string(shots + 1) + " triplets");
  }
  const TaskSource& source = *eligible[rng.uniform_index(eligible.size())];
  const std::size_t n = source.triplets.size();
  const std::size_t queries = std::min(query_batch, n - shots);
  const auto picked = rng.sample_without_replacement(n, shots + queries);

  Task task;
  task.relation = source.relation;
  for (std::size_t i = 0; i < picked.size(); ++i) {
    (i < shots ? task.support : task.query).push_back(source.triplets[picked[i]]);
  }
  const auto candidates = graph.candidates(source.relation);
  task.candidates.assign(candidates.begin(), candidates.end());
  return task;
}

Task make_eval_task(const KnowledgeGraph& graph, const TaskSource& source, std::size_t shots) {
  Task task;
  task.relation = source.relation;
  const std::size_t k = std::min(shots, source.triplets.size());
  task.support.assign(source.triplets.begin(), source.triplets.begin() + static_cast<std::ptrdiff_t>(k));
  task.query.assign(source.triplets.begin() + static_cast<std::ptrdiff_t>(k), source.triplets.end());
  const auto candidates = graph.candidates(source.relation);
  task.candidates.assign(candidates.begin(), candidates.end());
  return task;
}

EntityId sample_negative(const KnowledgeGraph& graph, EntityId head, RelationId relation, Rng& rng) {
  const std::size_t n = graph.num_entities();
  constexpr int kRejectionAttempts = 64;
  for (int attempt = 0; attempt < kRejectionAttempts; ++attempt) {
    const auto e = static_cast<EntityId>(rng.uniform_index(n));
    if (!graph.contains(head, relation, e)) return e;
  }
  // Dense relation: sample uniformly from the explicit complement instead.
  std::vector<EntityId> valid;
  for (std::size_t e = 0; e < n; ++e) {
    if (!graph.contains(head, relation, static_cast<EntityId>(e))) valid.push_back(static_cast<EntityId>(e));
  }
  if (valid.empty()) {
    fail(ErrorKind::kSampling, "cannot sample a negative tail: every entity forms a true triplet with head '" +
                                   graph.entity_name(head) + "' under relation '" +
                                   graph.relation_name(relation) + "'");
  }
  return valid[rng.uniform_index(valid.size())];
}

const char* category_name(RelationCategory c) {
  switch (c) {
    case RelationCategory::kOneToOne:
      return "1-1";
    case RelationCategory::kOneToMany:
      return "1-N";
    case RelationCategory::kManyToOne:
      return "N-1";
    case RelationCategory::kManyToMany:
      return "N-N";
  }
  return "?";
}

std::optional<RelationCategory> parse_category(const std::string& name) {
  for (auto c : {RelationCategory::kOneToOne, RelationCategory::kOneToMany, RelationCategory::kManyToOne,
                 RelationCategory::kManyToMany}) {
    if (name == category_name(c)) return c;
  }
  return std::nullopt;
}

RelationCardinality classify_pairs(RelationId relation, std::span<const EntityPair> pairs) {
  RelationCardinality out;
  out.relation = relation;
  if (pairs.empty()) return out;
  std::set<std::pair<EntityId, EntityId>> unique;
  for (const auto& p : pairs) unique.insert({p.head, p.tail});
  std::set<EntityId> heads;
  std::set<EntityId> tails;
  for (const auto& [h, t] : unique) {
    heads.insert(h);
    tails.insert(t);
  }
  const double count = static_cast<double>(unique.size());
  out.tails_per_head = count / static_cast<double>(heads.size());
  out.heads_per_tail = count / static_cast<double>(tails.size());
  const bool many_tails = out.tails_per_head >= kCardinalityThreshold;
  const bool many_heads = out.heads_per_tail >= kCardinalityThreshold;
  if (many_heads && many_tails) {
    out.category = RelationCategory::kManyToMany;
  } else if (many_tails) {
    out.category = RelationCategory::kOneToMany;
  } else if (many_heads) {
    out.category = RelationCategory::kManyToOne;
  } else {
    out.category = RelationCategory::kOneToOne;
  }
  return out;
}

RelationCardinality classify_relation(const KnowledgeGraph& graph, const TaskSource& task) {
  std::vector<EntityPair> pairs = task.triplets;
  for (const auto& t : graph.background()) {
    if (t.relation == task.relation) pairs.push_back({t.head, t.tail});
  }
  return classify_pairs(task.relation, pairs);
}

}  // namespace moemeta
