#include "moemeta/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "moemeta/error.hpp"

namespace moemeta {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'M', 'E', 'T', 'A', '1'};

void write_doubles(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, Tensor& t, const std::filesystem::path& path) {
  in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) fail(ErrorKind::kLoad, "truncated checkpoint " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const AdamState* adam,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  header["groups"] = nlohmann::json::array();
  for (const auto& g : params.groups()) {
    header["groups"].push_back({{"name", g.name}, {"shape", g.value.shape()}, {"trainable", g.trainable}});
  }
  if (adam) {
    header["adam"] = {{"step", adam->step},
                      {"learning_rate", adam->options.learning_rate},
                      {"beta1", adam->options.beta1},
                      {"beta2", adam->options.beta2},
                      {"epsilon", adam->options.epsilon}};
  } else {
    header["adam"] = nullptr;
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kLoad, "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& g : params.groups()) write_doubles(out, g.value);
  if (adam) {
    for (const auto& m : adam->first_moment) write_doubles(out, m);
    for (const auto& v : adam->second_moment) write_doubles(out, v);
  }
  if (!out) fail(ErrorKind::kLoad, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kLoad, "cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    fail(ErrorKind::kLoad, "not a checkpoint file: " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) fail(ErrorKind::kLoad, "truncated checkpoint header " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kLoad, "corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& g : header.at("groups")) {
    const auto shape = g.at("shape").get<std::vector<std::size_t>>();
    ckpt.params.add(g.at("name").get<std::string>(), Tensor::with_shape(shape), g.at("trainable").get<bool>());
  }
  for (auto& g : ckpt.params.groups()) read_doubles(in, g.value, path);
  if (!header.at("adam").is_null()) {
    const auto& a = header.at("adam");
    AdamOptions options;
    options.learning_rate = a.at("learning_rate").get<double>();
    options.beta1 = a.at("beta1").get<double>();
    options.beta2 = a.at("beta2").get<double>();
    options.epsilon = a.at("epsilon").get<double>();
    AdamState state = AdamState::for_params(ckpt.params, options);
    state.step = a.at("step").get<std::uint64_t>();
    for (auto& m : state.first_moment) read_doubles(in, m, path);
    for (auto& v : state.second_moment) read_doubles(in, v, path);
    ckpt.adam = std::move(state);
  }
  return ckpt;
}

}  // namespace moemeta
