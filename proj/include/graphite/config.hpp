#pragma once

// key = value run configuration. '#' starts a comment; lists are comma
// separated. `task` is applied first because defaults depend on it.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "graphite/tasks.hpp"

namespace graphite {

namespace detail {

inline std::string_view cfg_trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> cfg_list(std::string_view v) {
  std::vector<std::string> out;
  if (cfg_trim(v).empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = v.find(',', pos);
    out.emplace_back(cfg_trim(v.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

template <typename T>
T cfg_number(const std::string& key, std::string_view v) {
  v = cfg_trim(v);
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

inline bool cfg_bool(const std::string& key, std::string_view v) {
  v = cfg_trim(v);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + std::string(v) + "'");
}

template <typename T>
std::vector<T> cfg_numbers(const std::string& key, std::string_view v) {
  std::vector<T> out;
  for (const auto& s : cfg_list(v)) out.push_back(cfg_number<T>(key, s));
  return out;
}

template <typename T>
std::string cfg_join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", v[k]);
      out += buf;
    } else {
      out += std::to_string(v[k]);
    }
  }
  return out;
}

inline std::string cfg_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Applies one key. Unknown keys and bad values throw ConfigError.
inline void apply_config_key(RunConfig& c, const std::string& key, std::string_view value) {
  using namespace detail;
  const std::string v(cfg_trim(value));
  if (key == "task") {
    c.task = parse_task(v);
  } else if (key == "model") {
    c.model = parse_model_kind(v);
  } else if (key == "encoder_hidden") {
    c.encoder_hidden = cfg_numbers<Index>(key, v);
  } else if (key == "latent_dim") {
    c.latent_dim = cfg_number<Index>(key, v);
  } else if (key == "decoder_dims") {
    c.decoder_dims = cfg_numbers<Index>(key, v);
  } else if (key == "latent_mlp") {
    c.latent_mlp = cfg_numbers<Index>(key, v);
  } else if (key == "combine_all_rounds") {
    c.combine_all_rounds = cfg_bool(key, v);
  } else if (key == "norm") {
    c.norm = parse_similarity_norm(v);
  } else if (key == "decoder_gcn_norm") {
    c.decoder_gcn_norm = cfg_bool(key, v);
  } else if (key == "self_loops") {
    c.self_loops = cfg_bool(key, v);
  } else if (key == "use_features") {
    c.use_features = cfg_bool(key, v);
  } else if (key == "normalize_features") {
    c.normalize_features = cfg_bool(key, v);
  } else if (key == "lambda" || key == "lambda_grid") {
    c.lambda_grid = cfg_numbers<double>(key, v);
  } else if (key == "dropout" || key == "dropout_grid") {
    c.dropout_grid = cfg_numbers<double>(key, v);
  } else if (key == "skip" || key == "skip_grid") {
    c.skip_grid.clear();
    for (const auto& s : cfg_list(v)) c.skip_grid.push_back(parse_skip_mode(s));
  } else if (key == "gamma" || key == "gamma_grid") {
    c.gamma_grid = cfg_numbers<double>(key, v);
  } else if (key == "lr") {
    c.learning_rate = cfg_number<double>(key, v);
  } else if (key == "iters") {
    c.iterations = cfg_number<int>(key, v);
  } else if (key == "eval_every") {
    c.eval_every = cfg_number<int>(key, v);
  } else if (key == "patience") {
    c.patience = cfg_number<int>(key, v);
  } else if (key == "seeds") {
    c.seeds = cfg_number<int>(key, v);
  } else if (key == "base_seed") {
    c.base_seed = cfg_number<std::uint64_t>(key, v);
  } else if (key == "dataset") {
    c.dataset = v;
  } else if (key == "family") {
    if (v.empty()) c.family.reset();
    else c.family = parse_family(v);
  } else if (key == "nodes") {
    c.nodes = cfg_number<Index>(key, v);
  } else if (key == "graph_count") {
    c.graph_count = cfg_number<Index>(key, v);
  } else if (key == "n_min") {
    c.n_min = cfg_number<Index>(key, v);
  } else if (key == "n_max") {
    c.n_max = cfg_number<Index>(key, v);
  } else if (key == "val_frac") {
    c.val_frac = cfg_number<double>(key, v);
  } else if (key == "test_frac") {
    c.test_frac = cfg_number<double>(key, v);
  } else if (key == "labels_per_class") {
    c.labels_per_class = cfg_number<int>(key, v);
  } else if (key == "val_nodes") {
    c.val_nodes = cfg_number<int>(key, v);
  } else if (key == "test_nodes") {
    c.test_nodes = cfg_number<int>(key, v);
  } else if (key == "subsample_count") {
    c.subsample_count = cfg_number<std::size_t>(key, v);
  } else if (key == "weighted") {
    c.weighted = cfg_bool(key, v);
  } else if (key == "eval_samples") {
    c.eval_samples = cfg_number<int>(key, v);
  } else if (key == "importance_weighted") {
    c.importance_weighted = cfg_bool(key, v);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

inline RunConfig parse_run_config(std::string_view text, const std::string& origin = "config") {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t number = 0;
  std::optional<TaskKind> task;
  while (std::getline(is, line)) {
    ++number;
    std::string_view t = line;
    if (auto hash = t.find('#'); hash != std::string_view::npos) t = t.substr(0, hash);
    t = detail::cfg_trim(t);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
    }
    std::string key(detail::cfg_trim(t.substr(0, eq)));
    std::string value(detail::cfg_trim(t.substr(eq + 1)));
    if (key == "task") task = parse_task(value);
    entries.emplace_back(std::move(key), std::move(value));
  }
  RunConfig c = default_run_config(task.value_or(TaskKind::link));
  for (const auto& [k, v] : entries) {
    try {
      apply_config_key(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

/// Every key, fixed order. Parsing this text gives back the same config.
inline std::string resolved_config_text(const RunConfig& c) {
  using namespace detail;
  std::string skips;
  for (std::size_t k = 0; k < c.skip_grid.size(); ++k) skips += (k ? "," : "") + std::string(to_string(c.skip_grid[k]));
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream os;
  os << "task = " << to_string(c.task) << "\n"
     << "model = " << to_string(c.model) << "\n"
     << "encoder_hidden = " << cfg_join(c.encoder_hidden) << "\n"
     << "latent_dim = " << c.latent_dim << "\n"
     << "decoder_dims = " << cfg_join(c.decoder_dims) << "\n"
     << "latent_mlp = " << cfg_join(c.latent_mlp) << "\n"
     << "combine_all_rounds = " << b(c.combine_all_rounds) << "\n"
     << "norm = " << to_string(c.norm) << "\n"
     << "decoder_gcn_norm = " << b(c.decoder_gcn_norm) << "\n"
     << "self_loops = " << b(c.self_loops) << "\n"
     << "use_features = " << b(c.use_features) << "\n"
     << "normalize_features = " << b(c.normalize_features) << "\n"
     << "lambda_grid = " << cfg_join(c.lambda_grid) << "\n"
     << "dropout_grid = " << cfg_join(c.dropout_grid) << "\n"
     << "skip_grid = " << skips << "\n"
     << "gamma_grid = " << cfg_join(c.gamma_grid) << "\n"
     << "lr = " << cfg_double(c.learning_rate) << "\n"
     << "iters = " << c.iterations << "\n"
     << "eval_every = " << c.eval_every << "\n"
     << "patience = " << c.patience << "\n"
     << "seeds = " << c.seeds << "\n"
     << "base_seed = " << c.base_seed << "\n"
     << "dataset = " << c.dataset << "\n"
     << "family = " << (c.family ? std::string(to_string(*c.family)) : std::string()) << "\n"
     << "nodes = " << c.nodes << "\n"
     << "graph_count = " << c.graph_count << "\n"
     << "n_min = " << c.n_min << "\n"
     << "n_max = " << c.n_max << "\n"
     << "val_frac = " << cfg_double(c.val_frac) << "\n"
     << "test_frac = " << cfg_double(c.test_frac) << "\n"
     << "labels_per_class = " << c.labels_per_class << "\n"
     << "val_nodes = " << c.val_nodes << "\n"
     << "test_nodes = " << c.test_nodes << "\n"
     << "subsample_count = " << c.subsample_count << "\n"
     << "weighted = " << b(c.weighted) << "\n"
     << "eval_samples = " << c.eval_samples << "\n"
     << "importance_weighted = " << b(c.importance_weighted) << "\n";
  return os.str();
}

/// 16 hex digits of FNV-1a over the resolved text.
inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(resolved_config_text(c))));
  return buf;
}

}  // namespace graphite
