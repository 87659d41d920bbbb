#pragma once

#include <filesystem>
#include <optional>

#include "json.hpp"

#include "moemeta/adam.hpp"
#include "moemeta/params.hpp"

namespace moemeta {

// Binary checkpoint: magic, a length-prefixed JSON header (metadata, group
// names and shapes, Adam scalars), then raw little-endian doubles for every
// group value followed by the Adam moments when present. Lossless for doubles.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamSet params;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const AdamState* adam,
                     const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moemeta
