#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "moemeta/error.hpp"
#include "moemeta/graph.hpp"

namespace moemeta {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kPathGraph = "path_graph";
const char* const kTrainTasks = "train_tasks.json";
const char* const kDevTasks = "dev_tasks.json";
const char* const kTestTasks = "test_tasks.json";
const char* const kCandidates = "rel2candidates.json";
const char* const kEntityIds = "ent2ids.json";
const char* const kRelationIds = "rel2ids.json";
const char* const kEmbeddings = "entity_embeddings.tsv";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::ifstream open_required(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::kLoad, "missing dataset file: " + path.string());
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kLoad, "cannot read dataset file: " + path.string());
  return in;
}

json read_json(const fs::path& path) {
  std::ifstream in = open_required(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kValidation, path.filename().string() + ": malformed JSON: " + e.what());
  }
}

RawTaskFile read_task_file(const fs::path& path) {
  const json doc = read_json(path);
  const std::string file = path.filename().string();
  if (!doc.is_object()) fail(ErrorKind::kValidation, file + ": expected an object of relation -> triplets");
  RawTaskFile tasks;
  for (const auto& [relation, triplets] : doc.items()) {
    if (!triplets.is_array()) {
      fail(ErrorKind::kValidation, file + ": relation '" + relation + "' does not map to an array");
    }
    auto& out = tasks[relation];
    std::size_t index = 0;
    for (const auto& t : triplets) {
      if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_string() || !t[2].is_string()) {
        fail(ErrorKind::kValidation, file + ": relation '" + relation + "', triplet #" + std::to_string(index) +
                                         " is not a [head, relation, tail] string triple: " + t.dump());
      }
      out.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
      ++index;
    }
  }
  return tasks;
}

std::map<std::string, std::int64_t> read_id_map(const fs::path& path) {
  const json doc = read_json(path);
  if (!doc.is_object()) fail(ErrorKind::kValidation, path.filename().string() + ": expected an object");
  std::map<std::string, std::int64_t> ids;
  for (const auto& [name, id] : doc.items()) {
    if (!id.is_number_integer()) {
      fail(ErrorKind::kValidation, path.filename().string() + ": id of '" + name + "' is not an integer");
    }
    ids[name] = id.get<std::int64_t>();
  }
  return ids;
}

json task_file_json(const RawTaskFile& tasks) {
  json doc = json::object();
  for (const auto& [relation, triplets] : tasks) {
    json arr = json::array();
    for (const auto& t : triplets) arr.push_back({t.head, t.relation, t.tail});
    doc[relation] = std::move(arr);
  }
  return doc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kLoad, "cannot write " + path.string());
  out << text;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Builds a dense name <-> id assignment, either from an explicit id map or from
// sorted names.
std::vector<std::string> assign_ids(const std::optional<std::map<std::string, std::int64_t>>& explicit_ids,
                                    const std::set<std::string>& observed, const char* map_file) {
  if (!explicit_ids) return {observed.begin(), observed.end()};
  std::vector<std::string> names(explicit_ids->size());
  std::vector<bool> seen(names.size(), false);
  for (const auto& [name, id] : *explicit_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= names.size() || seen[static_cast<std::size_t>(id)]) {
      fail(ErrorKind::kValidation, std::string(map_file) + ": ids must be a permutation of 0.." +
                                       std::to_string(names.size() - 1) + " (offending entry '" + name + "')");
    }
    seen[static_cast<std::size_t>(id)] = true;
    names[static_cast<std::size_t>(id)] = name;
  }
  return names;
}

}  // namespace

// Populates KnowledgeGraph internals; lives here so the class stays immutable
// to everyone else.
class GraphBuilder {
 public:
  static Dataset build(const RawDataset& raw);
};

RawDataset read_raw_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::kLoad, "dataset directory not found: " + dir.string());
  RawDataset raw;
  {
    std::ifstream in = open_required(dir / kPathGraph);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto fields = split_tabs(line);
      if (fields.size() != 3) {
        fail(ErrorKind::kValidation, std::string(kPathGraph) + " line " + std::to_string(line_no) +
                                         ": expected head<TAB>relation<TAB>tail, got '" + line + "'");
      }
      raw.background.push_back({fields[0], fields[1], fields[2]});
    }
  }
  raw.train_tasks = read_task_file(dir / kTrainTasks);
  raw.dev_tasks = read_task_file(dir / kDevTasks);
  raw.test_tasks = read_task_file(dir / kTestTasks);

  const json candidates = read_json(dir / kCandidates);
  if (!candidates.is_object()) fail(ErrorKind::kValidation, std::string(kCandidates) + ": expected an object");
  for (const auto& [relation, list] : candidates.items()) {
    if (!list.is_array()) {
      fail(ErrorKind::kValidation, std::string(kCandidates) + ": relation '" + relation + "' is not an array");
    }
    auto& out = raw.candidates[relation];
    for (const auto& name : list) {
      if (!name.is_string()) {
        fail(ErrorKind::kValidation, std::string(kCandidates) + ": relation '" + relation +
                                         "' has a non-string candidate " + name.dump());
      }
      out.push_back(name.get<std::string>());
    }
  }

  if (fs::exists(dir / kEntityIds)) raw.entity_ids = read_id_map(dir / kEntityIds);
  if (fs::exists(dir / kRelationIds)) raw.relation_ids = read_id_map(dir / kRelationIds);

  if (fs::exists(dir / kEmbeddings)) {
    std::ifstream in(dir / kEmbeddings);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto fields = split_tabs(line);
      if (fields.size() < 2) {
        fail(ErrorKind::kValidation, std::string(kEmbeddings) + " line " + std::to_string(line_no) +
                                         ": expected name followed by values");
      }
      std::vector<double> values;
      for (std::size_t i = 1; i < fields.size(); ++i) {
        try {
          std::size_t used = 0;
          values.push_back(std::stod(fields[i], &used));
          if (used != fields[i].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
          fail(ErrorKind::kValidation, std::string(kEmbeddings) + " line " + std::to_string(line_no) +
                                           ": bad number '" + fields[i] + "'");
        }
      }
      raw.entity_embeddings.emplace_back(fields[0], std::move(values));
    }
  }
  return raw;
}

void write_raw_dataset(const RawDataset& raw, const fs::path& dir) {
  fs::create_directories(dir);
  std::string graph;
  for (const auto& t : raw.background) graph += t.head + "\t" + t.relation + "\t" + t.tail + "\n";
  write_text(dir / kPathGraph, graph);
  write_text(dir / kTrainTasks, task_file_json(raw.train_tasks).dump() + "\n");
  write_text(dir / kDevTasks, task_file_json(raw.dev_tasks).dump() + "\n");
  write_text(dir / kTestTasks, task_file_json(raw.test_tasks).dump() + "\n");
  json candidates = json::object();
  for (const auto& [relation, list] : raw.candidates) candidates[relation] = list;
  write_text(dir / kCandidates, candidates.dump() + "\n");
  if (raw.entity_ids) write_text(dir / kEntityIds, json(*raw.entity_ids).dump() + "\n");
  if (raw.relation_ids) write_text(dir / kRelationIds, json(*raw.relation_ids).dump() + "\n");
  if (!raw.entity_embeddings.empty()) {
    std::string text;
    for (const auto& [name, values] : raw.entity_embeddings) {
      text += name;
      for (double v : values) text += "\t" + format_double(v);
      text += "\n";
    }
    write_text(dir / kEmbeddings, text);
  }
}

Dataset build_dataset(const RawDataset& raw) { return GraphBuilder::build(raw); }

Dataset load_dataset(const fs::path& dir) { return build_dataset(read_raw_dataset(dir)); }

Dataset GraphBuilder::build(const RawDataset& raw) {
  Dataset ds;
  KnowledgeGraph& g = ds.graph;

  std::set<std::string> entity_names;
  std::set<std::string> relation_names;
  for (const auto& t : raw.background) {
    entity_names.insert(t.head);
    entity_names.insert(t.tail);
    relation_names.insert(t.relation);
  }
  for (const RawTaskFile* file : {&raw.train_tasks, &raw.dev_tasks, &raw.test_tasks}) {
    for (const auto& [relation, _] : *file) relation_names.insert(relation);
  }

  g.entity_names_ = assign_ids(raw.entity_ids, entity_names, kEntityIds);
  g.relation_names_ = assign_ids(raw.relation_ids, relation_names, kRelationIds);
  for (std::size_t i = 0; i < g.entity_names_.size(); ++i) {
    g.entity_lookup_.emplace(g.entity_names_[i], static_cast<EntityId>(i));
  }
  for (std::size_t i = 0; i < g.relation_names_.size(); ++i) {
    g.relation_lookup_.emplace(g.relation_names_[i], static_cast<RelationId>(i));
  }

  auto entity = [&](const std::string& name, const std::string& where) -> EntityId {
    auto it = g.entity_lookup_.find(name);
    if (it == g.entity_lookup_.end()) {
      fail(ErrorKind::kValidation,
           where + ": entity '" + name + "' is absent from the background graph and id maps");
    }
    return it->second;
  };
  auto relation = [&](const std::string& name, const std::string& where) -> RelationId {
    auto it = g.relation_lookup_.find(name);
    if (it == g.relation_lookup_.end()) {
      fail(ErrorKind::kValidation, where + ": relation '" + name + "' is absent from the id maps");
    }
    return it->second;
  };

  std::set<RelationId> background_relations;
  g.background_.reserve(raw.background.size());
  for (std::size_t i = 0; i < raw.background.size(); ++i) {
    const auto& t = raw.background[i];
    const std::string where = std::string(kPathGraph) + " triplet " + std::to_string(i + 1);
    Triplet tr{entity(t.head, where), relation(t.relation, where), entity(t.tail, where)};
    background_relations.insert(tr.relation);
    g.background_.push_back(tr);
  }

  std::set<RelationId> task_relations;
  auto build_partition = [&](const RawTaskFile& file, const char* file_name, std::vector<TaskSource>& out) {
    for (const auto& [rel_name, triplets] : file) {
      const RelationId r = relation(rel_name, file_name);
      if (!task_relations.insert(r).second) {
        fail(ErrorKind::kValidation, std::string(file_name) + ": relation '" + rel_name +
                                         "' appears in more than one task split");
      }
      if (background_relations.count(r)) {
        fail(ErrorKind::kValidation, std::string(file_name) + ": task relation '" + rel_name +
                                         "' also occurs in " + kPathGraph);
      }
      TaskSource source;
      source.relation = r;
      std::set<std::pair<EntityId, EntityId>> seen;
      for (std::size_t i = 0; i < triplets.size(); ++i) {
        const auto& t = triplets[i];
        const std::string where = std::string(file_name) + ": relation '" + rel_name + "', triplet #" +
                                  std::to_string(i) + " [" + t.head + ", " + t.relation + ", " + t.tail + "]";
        if (t.relation != rel_name) {
          fail(ErrorKind::kValidation, where + ": relation field does not match its task key");
        }
        EntityPair pair{entity(t.head, where), entity(t.tail, where)};
        if (seen.insert({pair.head, pair.tail}).second) source.triplets.push_back(pair);
      }
      out.push_back(std::move(source));
    }
    std::sort(out.begin(), out.end(),
              [](const TaskSource& a, const TaskSource& b) { return a.relation < b.relation; });
  };
  build_partition(raw.train_tasks, kTrainTasks, ds.split.train);
  build_partition(raw.dev_tasks, kDevTasks, ds.split.dev);
  build_partition(raw.test_tasks, kTestTasks, ds.split.test);

  for (const auto& [rel_name, names] : raw.candidates) {
    const RelationId r = relation(rel_name, kCandidates);
    std::vector<EntityId> list;
    std::set<EntityId> seen;
    for (const auto& name : names) {
      const EntityId e = entity(name, std::string(kCandidates) + ": relation '" + rel_name + "'");
      if (seen.insert(e).second) list.push_back(e);
    }
    g.candidates_[r] = std::move(list);
  }
  // Ranked partitions need every true tail among the candidates.
  for (const auto* part : {&ds.split.dev, &ds.split.test}) {
    for (const auto& source : *part) {
      const std::string& rel_name = g.relation_names_[source.relation];
      auto it = g.candidates_.find(source.relation);
      if (it == g.candidates_.end()) {
        fail(ErrorKind::kValidation, std::string(kCandidates) + ": no candidate list for relation '" + rel_name + "'");
      }
      const std::set<EntityId> members(it->second.begin(), it->second.end());
      for (std::size_t i = 0; i < source.triplets.size(); ++i) {
        const auto& p = source.triplets[i];
        if (!members.count(p.tail)) {
          fail(ErrorKind::kValidation, std::string(kCandidates) + ": candidate list of relation '" + rel_name +
                                           "' is missing true tail '" + g.entity_names_[p.tail] + "' of query (" +
                                           g.entity_names_[p.head] + ", " + rel_name + ", ?)");
        }
      }
    }
  }

  g.neighbor_index_.assign(g.entity_names_.size(), {});
  for (const auto& t : g.background_) {
    g.neighbor_index_[t.head].push_back({t.relation, t.tail});
    g.neighbor_index_[t.tail].push_back({g.inverse_of(t.relation), t.head});
    g.triplet_set_.insert(g.key(t.head, t.relation, t.tail));
  }
  for (const auto* part : {&ds.split.train, &ds.split.dev, &ds.split.test}) {
    for (const auto& source : *part) {
      for (const auto& p : source.triplets) g.triplet_set_.insert(g.key(p.head, source.relation, p.tail));
    }
  }

  if (!raw.entity_embeddings.empty()) {
    const std::size_t dim = raw.entity_embeddings.front().second.size();
    Tensor table(g.entity_names_.size(), dim);
    g.pretrained_mask_.assign(g.entity_names_.size(), false);
    for (const auto& [name, values] : raw.entity_embeddings) {
      const EntityId e = entity(name, kEmbeddings);
      if (values.size() != dim) {
        fail(ErrorKind::kValidation, std::string(kEmbeddings) + ": entity '" + name + "' has " +
                                         std::to_string(values.size()) + " values, expected " + std::to_string(dim));
      }
      std::copy(values.begin(), values.end(), table.row(e).begin());
      g.pretrained_mask_[e] = true;
    }
    g.pretrained_ = std::move(table);
  }
  return ds;
}

std::optional<EntityId> KnowledgeGraph::find_entity(const std::string& name) const {
  auto it = entity_lookup_.find(name);
  if (it == entity_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> KnowledgeGraph::find_relation(const std::string& name) const {
  auto it = relation_lookup_.find(name);
  if (it == relation_lookup_.end()) return std::nullopt;
  return it->second;
}

bool KnowledgeGraph::contains(EntityId head, RelationId relation, EntityId tail) const {
  return triplet_set_.count(key(head, relation, tail)) != 0;
}

std::span<const EntityId> KnowledgeGraph::candidates(RelationId r) const {
  auto it = candidates_.find(r);
  if (it == candidates_.end()) return {};
  return it->second;
}

bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b) {
  return a.entity_names_ == b.entity_names_ && a.relation_names_ == b.relation_names_ &&
         a.background_ == b.background_ && a.neighbor_index_ == b.neighbor_index_ &&
         a.triplet_set_ == b.triplet_set_ && a.candidates_ == b.candidates_ && a.pretrained_ == b.pretrained_ &&
         a.pretrained_mask_ == b.pretrained_mask_;
}

const std::vector<TaskSource>& TaskSplit::partition(Partition p) const {
  switch (p) {
    case Partition::kTrain:
      return train;
    case Partition::kDev:
      return dev;
    case Partition::kTest:
      return test;
  }
  return train;
}

}  // namespace moemeta
