#include "moemeta/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <tuple>

#include "moemeta/error.hpp"

namespace moemeta {

using nlohmann::json;

namespace {

std::string padded(const char* prefix, std::size_t value, std::size_t width) {
  std::string digits = std::to_string(value);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

std::size_t width_for(std::size_t count) {
  std::size_t width = 1;
  for (std::size_t v = count > 0 ? count - 1 : 0; v >= 10; v /= 10) ++width;
  return std::max<std::size_t>(width, 2);
}

std::vector<double> gaussian(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

// `count` entities from `pool` nearest to `target` (excluding `self`), ties by index.
std::vector<std::size_t> nearest(const std::vector<std::vector<double>>& points, const std::vector<std::size_t>& pool,
                                 const std::vector<double>& target, std::size_t self, std::size_t count) {
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(pool.size());
  for (std::size_t e : pool) {
    if (e == self) continue;
    double d2 = 0.0;
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double diff = points[e][k] - target[k];
      d2 += diff * diff;
    }
    scored.emplace_back(d2, e);
  }
  count = std::min(count, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(count), scored.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(scored[i].second);
  return out;
}

struct RelationPlan {
  std::string profile;
  std::vector<double> offset;
};

// Generates up to `target_count` (head, tail) index pairs for one relation.
std::vector<std::pair<std::size_t, std::size_t>> relation_pairs(const SyntheticConfig& config,
                                                                const std::vector<std::vector<double>>& points,
                                                                const RelationPlan& plan,
                                                                std::size_t target_count,
                                                                std::vector<std::size_t>& pool_out, Rng& rng) {
  const std::size_t n = points.size();
  const bool pooled = plan.profile == "N-1" || plan.profile == "N-N";
  const bool fan = plan.profile == "1-N" || plan.profile == "N-N";
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  if (pooled) {
    pool = rng.sample_without_replacement(n, std::min(config.tail_pool, n));
    std::sort(pool.begin(), pool.end());
  }
  pool_out = pool;
  std::vector<std::size_t> heads(n);
  std::iota(heads.begin(), heads.end(), 0);
  rng.shuffle(heads);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t h : heads) {
    if (pairs.size() >= target_count) break;
    std::vector<double> target = points[h];
    for (std::size_t k = 0; k < target.size(); ++k) target[k] += plan.offset[k];
    for (std::size_t t : nearest(points, pool, target, h, fan ? config.fanout : 1)) {
      if (pairs.size() >= target_count) break;
      pairs.emplace_back(h, t);
    }
  }
  return pairs;
}

}  // namespace

json to_json(const SyntheticConfig& c) {
  return json{{"num_entities", c.num_entities},
              {"num_relations", c.num_relations},
              {"num_clusters", c.num_clusters},
              {"dev_relations", c.dev_relations},
              {"test_relations", c.test_relations},
              {"triplets_per_relation", c.triplets_per_relation},
              {"background_relations", c.background_relations},
              {"background_triplets_per_relation", c.background_triplets_per_relation},
              {"latent_dim", c.latent_dim},
              {"embedding_dim", c.embedding_dim},
              {"cluster_scale", c.cluster_scale},
              {"relation_noise", c.relation_noise},
              {"embedding_noise", c.embedding_noise},
              {"write_embeddings", c.write_embeddings},
              {"cardinality_profile", c.cardinality_profile},
              {"fanout", c.fanout},
              {"tail_pool", c.tail_pool}};
}

SyntheticConfig synthetic_config_from_json(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::kConfig, "synthetic config must be a JSON object");
  SyntheticConfig c;
  json merged = to_json(c);
  for (const auto& [key, value] : doc.items()) {
    if (!merged.contains(key)) fail(ErrorKind::kConfig, "unknown synthetic config key '" + key + "'");
    merged[key] = value;
  }
  try {
    c.num_entities = merged.at("num_entities").get<std::size_t>();
    c.num_relations = merged.at("num_relations").get<std::size_t>();
    c.num_clusters = merged.at("num_clusters").get<std::size_t>();
    c.dev_relations = merged.at("dev_relations").get<std::size_t>();
    c.test_relations = merged.at("test_relations").get<std::size_t>();
    c.triplets_per_relation = merged.at("triplets_per_relation").get<std::size_t>();
    c.background_relations = merged.at("background_relations").get<std::size_t>();
    c.background_triplets_per_relation = merged.at("background_triplets_per_relation").get<std::size_t>();
    c.latent_dim = merged.at("latent_dim").get<std::size_t>();
    c.embedding_dim = merged.at("embedding_dim").get<std::size_t>();
    c.cluster_scale = merged.at("cluster_scale").get<double>();
    c.relation_noise = merged.at("relation_noise").get<double>();
    c.embedding_noise = merged.at("embedding_noise").get<double>();
    c.write_embeddings = merged.at("write_embeddings").get<bool>();
    c.cardinality_profile = merged.at("cardinality_profile").get<std::vector<std::string>>();
    c.fanout = merged.at("fanout").get<std::size_t>();
    c.tail_pool = merged.at("tail_pool").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("bad synthetic config value: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const SyntheticConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "synthetic config: " + what);
  };
  require(c.num_entities >= 3, "num_entities must be at least 3");
  require(c.num_clusters >= 1, "num_clusters must be at least 1");
  require(c.num_clusters <= c.num_relations, "num_clusters (" + std::to_string(c.num_clusters) +
                                                 ") exceeds num_relations (" + std::to_string(c.num_relations) + ")");
  require(c.dev_relations + c.test_relations < c.num_relations,
          "fewer relations (" + std::to_string(c.num_relations) + ") than requested dev+test tasks plus one train task");
  require(c.triplets_per_relation >= 2, "triplets_per_relation must be at least 2");
  require(c.background_relations >= 1, "background_relations must be at least 1");
  require(c.latent_dim >= 1, "latent_dim must be at least 1");
  require(c.embedding_dim >= c.latent_dim, "embedding_dim must be at least latent_dim");
  require(c.fanout >= 1, "fanout must be at least 1");
  require(c.tail_pool >= 2, "tail_pool must be at least 2");
  require(!c.cardinality_profile.empty(), "cardinality_profile must not be empty");
  for (const auto& p : c.cardinality_profile) {
    require(parse_category(p).has_value(), "unknown cardinality profile '" + p + "'");
  }
  require(c.relation_noise >= 0.0 && c.embedding_noise >= 0.0, "noise levels must be non-negative");
}

SyntheticDataset generate_synthetic(const SyntheticConfig& config, Rng& rng) {
  validate(config);
  SyntheticDataset out;
  const std::size_t n = config.num_entities;
  const std::size_t ew = width_for(n);
  std::vector<std::string> entity_names;
  for (std::size_t e = 0; e < n; ++e) entity_names.push_back(padded("e", e, ew));

  for (std::size_t e = 0; e < n; ++e) out.entity_latent.push_back(gaussian(config.latent_dim, rng));
  const auto& points = out.entity_latent;

  auto scaled_direction = [&](double scale) {
    std::vector<double> v = gaussian(config.latent_dim, rng);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x = norm > 0.0 ? scale * x / norm : 0.0;
    return v;
  };

  std::vector<std::vector<double>> cluster_offsets;
  for (std::size_t c = 0; c < config.num_clusters; ++c) cluster_offsets.push_back(scaled_direction(config.cluster_scale));

  // Background relations: independent translations, one tail per head.
  const std::size_t bw = width_for(config.background_relations);
  std::vector<bool> covered(n, false);
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> background_seen;
  std::vector<RelationPlan> background_plans;
  for (std::size_t b = 0; b < config.background_relations; ++b) {
    RelationPlan plan{"1-1", scaled_direction(config.cluster_scale)};
    std::vector<std::size_t> pool;
    const std::string name = padded("bg", b, bw);
    for (const auto& [h, t] :
         relation_pairs(config, points, plan, config.background_triplets_per_relation, pool, rng)) {
      background_seen.insert({h, b, t});
      out.raw.background.push_back({entity_names[h], name, entity_names[t]});
      covered[h] = covered[t] = true;
    }
    background_plans.push_back(std::move(plan));
  }
  // Every entity must appear in the background graph to be part of the vocabulary.
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t e = 0; e < n; ++e) {
    if (covered[e]) continue;
    const std::size_t b = e % config.background_relations;
    std::vector<double> target = points[e];
    for (std::size_t k = 0; k < target.size(); ++k) target[k] += background_plans[b].offset[k];
    const std::size_t t = nearest(points, all, target, e, 1).front();
    if (background_seen.insert({e, b, t}).second) {
      out.raw.background.push_back({entity_names[e], padded("bg", b, bw), entity_names[t]});
    }
    covered[e] = covered[t] = true;
  }

  // Task relations: round-robin over clusters, so taking test then dev then
  // train relations in index order stratifies every split by cluster.
  const std::size_t rw = width_for(config.num_relations);
  for (std::size_t r = 0; r < config.num_relations; ++r) {
    const std::size_t cluster = r % config.num_clusters;
    const std::size_t within = r / config.num_clusters;
    RelationPlan plan;
    plan.profile = config.cardinality_profile[within % config.cardinality_profile.size()];
    plan.offset = cluster_offsets[cluster];
    for (double& x : plan.offset) x += config.relation_noise * rng.normal();

    const std::string name = padded("r", r, rw);
    std::vector<std::size_t> pool;
    const auto pairs = relation_pairs(config, points, plan, config.triplets_per_relation, pool, rng);
    std::vector<RawTriplet> triplets;
    for (const auto& [h, t] : pairs) triplets.push_back({entity_names[h], name, entity_names[t]});

    RawTaskFile* file = &out.raw.train_tasks;
    if (r < config.test_relations) {
      file = &out.raw.test_tasks;
    } else if (r < config.test_relations + config.dev_relations) {
      file = &out.raw.dev_tasks;
    }
    (*file)[name] = std::move(triplets);

    std::vector<std::string> candidates;
    for (std::size_t e : pool) candidates.push_back(entity_names[e]);
    out.raw.candidates[name] = std::move(candidates);
    out.relation_cluster[name] = static_cast<int>(cluster);
    out.relation_offset[name] = plan.offset;
    out.relation_profile[name] = plan.profile;
  }

  if (config.write_embeddings) {
    // Orthonormal lift of the planted space (Gram-Schmidt on Gaussian columns).
    const std::size_t d = config.embedding_dim;
    std::vector<std::vector<double>> basis;
    while (basis.size() < config.latent_dim) {
      std::vector<double> v = gaussian(d, rng);
      for (const auto& b : basis) {
        double proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) proj += v[i] * b[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= proj * b[i];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (double& x : v) x /= norm;
      basis.push_back(std::move(v));
    }
    for (std::size_t e = 0; e < n; ++e) {
      std::vector<double> emb(d, 0.0);
      for (std::size_t k = 0; k < config.latent_dim; ++k) {
        for (std::size_t i = 0; i < d; ++i) emb[i] += points[e][k] * basis[k][i];
      }
      for (double& x : emb) x += config.embedding_noise * rng.normal();
      out.raw.entity_embeddings.emplace_back(entity_names[e], std::move(emb));
    }
  }
  return out;
}

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir) {
  write_raw_dataset(data.raw, dir);
  std::ofstream out(dir / "clusters.json", std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kLoad, "cannot write " + (dir / "clusters.json").string());
  out << json(data.relation_cluster).dump() << "\n";
}

std::map<std::string, int> read_cluster_labels(const std::filesystem::path& dir) {
  const auto path = dir / "clusters.json";
  if (!std::filesystem::exists(path)) return {};
  std::ifstream in(path);
  try {
    return json::parse(in).get<std::map<std::string, int>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kValidation, "clusters.json: " + std::string(e.what()));
  }
}

}  // namespace moemeta
