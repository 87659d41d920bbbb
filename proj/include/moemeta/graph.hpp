#pragma once

// Knowledge-graph storage, dataset ingestion and episode sampling.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "moemeta/rng.hpp"
#include "moemeta/tensor.hpp"

namespace moemeta {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triplet {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct EntityPair {
  EntityId head = 0;
  EntityId tail = 0;
  friend bool operator==(const EntityPair&, const EntityPair&) = default;
};

struct Neighbor {
  RelationId relation = 0;
  EntityId entity = 0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Immutable after construction; safe for concurrent reads.
//
// Relation ids 0..R-1 name the base relations (background and task relations);
// id R + r is the inverse of r, so relation embedding tables have 2R rows.
class KnowledgeGraph {
 public:
  std::size_t num_entities() const noexcept { return entity_names_.size(); }
  std::size_t num_relations() const noexcept { return relation_names_.size(); }
  std::size_t num_relation_slots() const noexcept { return 2 * relation_names_.size(); }
  RelationId inverse_of(RelationId r) const noexcept {
    return static_cast<RelationId>(r + relation_names_.size());
  }

  const std::vector<std::string>& entity_names() const noexcept { return entity_names_; }
  const std::vector<std::string>& relation_names() const noexcept { return relation_names_; }
  const std::string& entity_name(EntityId e) const { return entity_names_.at(e); }
  const std::string& relation_name(RelationId r) const { return relation_names_.at(r); }
  std::optional<EntityId> find_entity(const std::string& name) const;
  std::optional<RelationId> find_relation(const std::string& name) const;

  const std::vector<Triplet>& background() const noexcept { return background_; }
  std::span<const Neighbor> neighbors(EntityId e) const { return neighbor_index_.at(e); }

  // Membership over background and task triplets.
  bool contains(EntityId head, RelationId relation, EntityId tail) const;
  std::size_t num_known_triplets() const noexcept { return triplet_set_.size(); }

  // Candidate tails of a task relation; empty when the dataset gives none.
  std::span<const EntityId> candidates(RelationId r) const;
  const std::map<RelationId, std::vector<EntityId>>& all_candidates() const noexcept { return candidates_; }

  // Optional pretrained entity vectors (|E| x d); rows without a vector are flagged false.
  const std::optional<Tensor>& pretrained_embeddings() const noexcept { return pretrained_; }
  const std::vector<bool>& pretrained_mask() const noexcept { return pretrained_mask_; }

  friend bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b);

 private:
  friend class GraphBuilder;

  std::uint64_t key(EntityId h, RelationId r, EntityId t) const {
    return (static_cast<std::uint64_t>(h) * num_relation_slots() + r) * num_entities() + t;
  }

  std::vector<std::string> entity_names_;
  std::vector<std::string> relation_names_;
  std::unordered_map<std::string, EntityId> entity_lookup_;
  std::unordered_map<std::string, RelationId> relation_lookup_;
  std::vector<Triplet> background_;
  std::vector<std::vector<Neighbor>> neighbor_index_;
  std::unordered_set<std::uint64_t> triplet_set_;
  std::map<RelationId, std::vector<EntityId>> candidates_;
  std::optional<Tensor> pretrained_;
  std::vector<bool> pretrained_mask_;
};

// All triplets of one task relation, in file order.
struct TaskSource {
  RelationId relation = 0;
  std::vector<EntityPair> triplets;
  friend bool operator==(const TaskSource&, const TaskSource&) = default;
};

enum class Partition { kTrain, kDev, kTest };

struct TaskSplit {
  std::vector<TaskSource> train;
  std::vector<TaskSource> dev;
  std::vector<TaskSource> test;

  const std::vector<TaskSource>& partition(Partition p) const;
  std::size_t num_tasks() const { return train.size() + dev.size() + test.size(); }
  friend bool operator==(const TaskSplit&, const TaskSplit&) = default;
};

struct Task {
  RelationId relation = 0;
  std::vector<EntityPair> support;
  std::vector<EntityPair> query;
  std::vector<EntityId> candidates;
};

struct Dataset {
  KnowledgeGraph graph;
  TaskSplit split;
};

// ---- on-disk layout -------------------------------------------------------

struct RawTriplet {
  std::string head;
  std::string relation;
  std::string tail;
  friend bool operator==(const RawTriplet&, const RawTriplet&) = default;
};

using RawTaskFile = std::map<std::string, std::vector<RawTriplet>>;

// Name-level contents of a dataset directory.
struct RawDataset {
  std::vector<RawTriplet> background;
  RawTaskFile train_tasks;
  RawTaskFile dev_tasks;
  RawTaskFile test_tasks;
  std::map<std::string, std::vector<std::string>> candidates;
  std::optional<std::map<std::string, std::int64_t>> entity_ids;
  std::optional<std::map<std::string, std::int64_t>> relation_ids;
  std::vector<std::pair<std::string, std::vector<double>>> entity_embeddings;
};

RawDataset read_raw_dataset(const std::filesystem::path& dir);
void write_raw_dataset(const RawDataset& raw, const std::filesystem::path& dir);

// Validates names and ids, assigns ids (sorted by name unless id maps are
// given) and builds all indices.
Dataset build_dataset(const RawDataset& raw);
Dataset load_dataset(const std::filesystem::path& dir);

// ---- sampling --------------------------------------------------------------

// All neighbors in index order when there are at most `cap`; otherwise a
// uniform sample of exactly `cap` without replacement, kept in index order.
std::vector<Neighbor> neighbors_of(const KnowledgeGraph& graph, EntityId entity, std::size_t cap, Rng& rng);

// Per-run neighborhood cache: the sample for an entity depends only on
// (graph, cap, seed, entity). Filled eagerly, read-only afterwards.
class NeighborCache {
 public:
  NeighborCache() = default;
  NeighborCache(const KnowledgeGraph& graph, std::size_t cap, std::uint64_t seed);

  std::span<const Neighbor> get(EntityId entity) const { return lists_.at(entity); }
  std::size_t cap() const noexcept { return cap_; }

 private:
  std::size_t cap_ = 0;
  std::vector<std::vector<Neighbor>> lists_;
};

Task sample_task(const KnowledgeGraph& graph, const std::vector<TaskSource>& partition, std::size_t shots,
                 std::size_t query_batch, Rng& rng);

// Evaluation episode: the first `shots` triplets support, the rest are queries.
Task make_eval_task(const KnowledgeGraph& graph, const TaskSource& source, std::size_t shots);

EntityId sample_negative(const KnowledgeGraph& graph, EntityId head, RelationId relation, Rng& rng);

enum class RelationCategory { kOneToOne, kOneToMany, kManyToOne, kManyToMany };

const char* category_name(RelationCategory c);
std::optional<RelationCategory> parse_category(const std::string& name);

struct RelationCardinality {
  RelationId relation = 0;
  double tails_per_head = 0.0;
  double heads_per_tail = 0.0;
  RelationCategory category = RelationCategory::kOneToOne;
};

inline constexpr double kCardinalityThreshold = 1.5;

RelationCardinality classify_pairs(RelationId relation, std::span<const EntityPair> pairs);
// Ratios over the union of the relation's background and task triplets.
RelationCardinality classify_relation(const KnowledgeGraph& graph, const TaskSource& task);

}  // namespace moemeta
