#include "vfa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "vfa/error.hpp"

namespace vfa {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["channels"] = c.extractor.channels;
  j["match_channels"] = c.extractor.match_channels;
  j["shared_weights"] = c.extractor.shared_weights;
  j["leaky_slope"] = c.extractor.leaky_slope;
  j["kernel"] = c.extractor.kernel;
  j["temperature"] = c.attention.temperature ? json(*c.attention.temperature) : json("sqrt_dk");
  j["similarity"] = to_string(c.attention.similarity);
  j["window"] = c.attention.window;
  j["beta0"] = c.beta0;
  j["diffeomorphic"] = c.diffeomorphic;
  j["integration_steps"] = c.integration_steps;
  j["seed"] = c.seed;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.extractor.channels = j.at("channels").get<std::vector<std::int64_t>>();
  c.extractor.match_channels = j.at("match_channels").get<std::int64_t>();
  c.extractor.shared_weights = j.at("shared_weights").get<bool>();
  c.extractor.leaky_slope = j.at("leaky_slope").get<double>();
  c.extractor.kernel = j.at("kernel").get<int>();
  const json& t = j.at("temperature");
  if (t.is_string()) {
    if (t.get<std::string>() != "sqrt_dk") throw FormatError("checkpoint: unknown temperature symbol");
  } else {
    c.attention.temperature = t.get<double>();
  }
  c.attention.similarity = parse_similarity(j.at("similarity").get<std::string>());
  c.attention.window = j.at("window").get<int>();
  c.beta0 = j.at("beta0").get<double>();
  c.diffeomorphic = j.at("diffeomorphic").get<bool>();
  c.integration_steps = j.at("integration_steps").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const VfaModel<T>& model, const Metadata& metadata) {
  json head;
  head["config"] = config_to_json(model.config());
  head["dims"] = model.dims();
  head["metadata"] = metadata;
  json tensors = json::array();
  std::string payload;
  for (const auto& [name, v] : model.parameters()) {
    tensors.push_back({{"name", name}, {"shape", v.shape()}});
    for (T x : v.data()) {
      const float f = static_cast<float>(x);
      char b[4];
      std::memcpy(b, &f, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
      payload.append(b, 4);
    }
  }
  head["tensors"] = tensors;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "VFACKPT 1\n" << head.dump() << '\n';
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

template <typename T>
VfaModel<T> load_checkpoint(const std::filesystem::path& path, Metadata* metadata) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string magic, line;
  std::getline(is, magic);
  if (magic != "VFACKPT 1") throw FormatError(path.string() + ":1: expected 'VFACKPT 1'");
  if (!std::getline(is, line)) throw FormatError(path.string() + ":2: missing JSON header");
  json head;
  try {
    head = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ":2: " + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    const ModelConfig cfg = config_from_json(head.at("config"));
    VfaModel<T> model(cfg, head.at("dims").get<int>());
    auto params = model.parameters();
    const json& tensors = head.at("tensors");
    if (tensors.size() != params.size()) {
      throw FormatError(path.string() + ": checkpoint lists " + std::to_string(tensors.size()) +
                        " tensors, the configured model has " + std::to_string(params.size()));
    }
    std::size_t expected = 0;
    for (const auto& [name, v] : params) expected += static_cast<std::size_t>(v.numel()) * 4;
    if (payload.size() != expected) {
      throw FormatError(path.string() + ": corrupt payload, expected " + std::to_string(expected) +
                        " bytes, found " + std::to_string(payload.size()));
    }
    std::size_t off = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& [name, v] = params[k];
      if (tensors[k].at("name").get<std::string>() != name || tensors[k].at("shape").get<Shape>() != v.shape()) {
        throw FormatError(path.string() + ": tensor " + std::to_string(k) + " is '" +
                          tensors[k].at("name").get<std::string>() + "', expected '" + name + "' with shape " +
                          to_string(v.shape()));
      }
      auto dst = v.mutable_data();
      for (auto& x : dst) {
        char b[4];
        std::memcpy(b, payload.data() + off, 4);
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
        float f;
        std::memcpy(&f, b, 4);
        x = static_cast<T>(f);
        off += 4;
      }
    }
    if (metadata) *metadata = head.value("metadata", Metadata{});
    return model;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template void save_checkpoint(const std::filesystem::path&, const VfaModel<float>&, const Metadata&);
template void save_checkpoint(const std::filesystem::path&, const VfaModel<double>&, const Metadata&);
template VfaModel<float> load_checkpoint<float>(const std::filesystem::path&, Metadata*);
template VfaModel<double> load_checkpoint<double>(const std::filesystem::path&, Metadata*);

}  // namespace vfa
