#pragma once

// Synthetic knowledge graphs with planted relation clusters.
//
// Entities live in a low-dimensional planted space. Every task relation owns a
// translation vector equal to its cluster's shared translation plus
// per-relation noise; a head's tails are the entities nearest to head +
// translation (restricted to a tail pool for N-1 / N-N profiles). The planted
// points are written, lifted into the embedding dimension through a random
// orthonormal map plus noise, as the pretrained entity embedding file.

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "moemeta/graph.hpp"
#include "moemeta/rng.hpp"

namespace moemeta {

struct SyntheticConfig {
  std::size_t num_entities = 200;
  std::size_t num_relations = 8;
  std::size_t num_clusters = 2;
  std::size_t dev_relations = 2;
  std::size_t test_relations = 2;
  std::size_t triplets_per_relation = 40;
  std::size_t background_relations = 6;
  std::size_t background_triplets_per_relation = 200;
  std::size_t latent_dim = 4;
  std::size_t embedding_dim = 32;
  double cluster_scale = 1.5;
  double relation_noise = 0.1;
  double embedding_noise = 0.05;
  bool write_embeddings = true;
  // Cycled over the relations of each cluster: "1-1", "1-N", "N-1" or "N-N".
  std::vector<std::string> cardinality_profile = {"1-1", "1-N", "N-1", "N-N"};
  std::size_t fanout = 3;
  std::size_t tail_pool = 15;
};

nlohmann::json to_json(const SyntheticConfig& config);
// Unknown keys are rejected with a config error.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& doc);
void validate(const SyntheticConfig& config);

struct SyntheticDataset {
  RawDataset raw;
  // Task relation name -> planted cluster index.
  std::map<std::string, int> relation_cluster;
  std::map<std::string, std::vector<double>> relation_offset;
  std::map<std::string, std::string> relation_profile;
  std::vector<std::vector<double>> entity_latent;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config, Rng& rng);

// Writes the dataset layout plus clusters.json (relation -> cluster index).
void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);

// Reads clusters.json when present; empty map otherwise.
std::map<std::string, int> read_cluster_labels(const std::filesystem::path& dir);

}  // namespace moemeta
