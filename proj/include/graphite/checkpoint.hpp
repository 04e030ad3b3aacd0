#pragma once

// Checkpoint layout (all integers little-endian):
//   8 bytes  magic "GRAPHITE"
//   u32      format version
//   u64      header length in bytes
//   header   JSON: {"model": <ModelConfig>, "meta": {...},
//                   "parameters": [{"name", "rows", "cols"}, ...]}
//   payload  float64 little-endian, column-major, in header order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "graphite/model.hpp"

namespace graphite {

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'P', 'H', 'I', 'T', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"node_count", c.node_count},
          {"feature_dim", c.feature_dim},
          {"encoder_hidden", c.encoder_hidden},
          {"latent_dim", c.latent_dim},
          {"decoder_dims", c.decoder_dims},
          {"latent_mlp", c.latent_mlp},
          {"combine_all_rounds", c.combine_all_rounds},
          {"combine_weights", c.combine_weights},
          {"lambda", c.lambda},
          {"skip", to_string(c.skip)},
          {"norm", to_string(c.norm)},
          {"hidden_activation", to_string(c.hidden_activation)},
          {"bias", c.bias == BiasMode::none ? "none" : c.bias == BiasMode::full ? "full" : "broadcast"},
          {"decoder_uses_features", c.decoder_uses_features},
          {"fast_decode", c.fast_decode},
          {"decoder_gcn_norm", c.decoder_gcn_norm},
          {"observation", to_string(c.observation)},
          {"log_sigma_min", c.log_sigma_min},
          {"log_sigma_max", c.log_sigma_max},
          {"seed", c.seed}};
}

inline BiasMode parse_bias_mode(std::string_view s) {
  if (s == "none") return BiasMode::none;
  if (s == "broadcast") return BiasMode::broadcast;
  if (s == "full") return BiasMode::full;
  throw ConfigError("unknown bias mode '" + std::string(s) + "'");
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.node_count = j.at("node_count").get<Index>();
    c.feature_dim = j.at("feature_dim").get<Index>();
    c.encoder_hidden = j.at("encoder_hidden").get<std::vector<Index>>();
    c.latent_dim = j.at("latent_dim").get<Index>();
    c.decoder_dims = j.at("decoder_dims").get<std::vector<Index>>();
    c.latent_mlp = j.at("latent_mlp").get<std::vector<Index>>();
    c.combine_all_rounds = j.at("combine_all_rounds").get<bool>();
    c.combine_weights = j.at("combine_weights").get<std::vector<double>>();
    c.lambda = j.at("lambda").get<double>();
    c.skip = parse_skip_mode(j.at("skip").get<std::string>());
    c.norm = parse_similarity_norm(j.at("norm").get<std::string>());
    c.hidden_activation = parse_activation(j.at("hidden_activation").get<std::string>());
    c.bias = parse_bias_mode(j.at("bias").get<std::string>());
    c.decoder_uses_features = j.at("decoder_uses_features").get<bool>();
    c.fast_decode = j.at("fast_decode").get<bool>();
    c.decoder_gcn_norm = j.at("decoder_gcn_norm").get<bool>();
    c.observation = parse_observation(j.at("observation").get<std::string>());
    c.log_sigma_min = j.at("log_sigma_min").get<double>();
    c.log_sigma_max = j.at("log_sigma_max").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint model config: ") + e.what());
  }
}

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw DataError("truncated checkpoint", path);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, GraphiteModel& model, const nlohmann::json& meta = {}) {
  nlohmann::json header;
  header["model"] = to_json(model.config());
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  header["parameters"] = nlohmann::json::array();
  for (Parameter* p : model.parameters()) {
    header["parameters"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing", path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (Parameter* p : model.parameters()) {
    for (Index k = 0; k < p->value.size(); ++k) detail::write_le<double>(os, p->value.data()[k]);
  }
  if (!os) throw DataError("write failed", path);
}

struct LoadedCheckpoint {
  std::unique_ptr<GraphiteModel> model;
  nlohmann::json meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint", path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("not a graphite checkpoint", path);
  }
  const auto version = detail::read_le<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version), path);
  }
  const auto length = detail::read_le<std::uint64_t>(is, path);
  if (length > (1ull << 30)) throw DataError("implausible header length", path);
  std::string text(length, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(length))) throw DataError("truncated header", path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad header: ") + e.what(), path);
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<GraphiteModel>(model_config_from_json(header.at("model")));
  out.meta = header.value("meta", nlohmann::json::object());
  auto params = out.model->parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != params.size()) {
    throw DataError("checkpoint lists " + std::to_string(listed.size()) + " parameters, model has " +
                        std::to_string(params.size()),
                    path);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& entry = listed[k];
    Parameter& p = *params[k];
    const auto rows = entry.at("rows").get<Index>(), cols = entry.at("cols").get<Index>();
    if (entry.at("name").get<std::string>() != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      throw DataError("parameter '" + entry.at("name").get<std::string>() + "' [" + std::to_string(rows) + "x" +
                          std::to_string(cols) + "] does not match model parameter '" + p.name + "'",
                      path);
    }
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = detail::read_le<double>(is, path);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after payload", path);
  return out;
}

}  // namespace graphite
