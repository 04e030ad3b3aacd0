#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "graphite/graph.hpp"
#include "graphite/log.hpp"

namespace graphite {

struct DatasetBundle {
  Graph graph;
  Index feature_dim = 0;
  int class_count = 0;
  std::vector<std::string> ids;  // index -> node id
  std::unordered_map<std::string, Index> index;
  std::vector<std::string> class_names;  // class id -> name
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    const std::size_t tab = line.find('\t', pos);
    const std::size_t end = tab == std::string_view::npos ? line.size() : tab;
    out.push_back(line.substr(pos, end - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

inline double parse_double(std::string_view s, const std::string& file, std::size_t line) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("not a number: '" + std::string(s) + "'", file, line);
  }
  return v;
}

inline Index parse_index(std::string_view s, const std::string& file, std::size_t line) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || v < 0) {
    throw DataError("not a node index: '" + std::string(s) + "'", file, line);
  }
  return static_cast<Index>(v);
}

/// Calls `row(fields, line_number)` for every non-blank, non-comment line.
template <typename F>
void for_each_row(const std::filesystem::path& path, F&& row) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open", path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    std::string_view t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    row(split_fields(t), number);
  }
}

}  // namespace detail

/// Reads edges.tsv plus optional features.tsv and labels.tsv from `dir`.
/// Node order is the features file order when present, else first
/// appearance in edges.tsv then labels.tsv.
inline DatasetBundle ingest_citation_dataset(const std::filesystem::path& dir) {
  DatasetBundle b;
  const auto edges_path = dir / "edges.tsv", features_path = dir / "features.tsv", labels_path = dir / "labels.tsv";
  if (!std::filesystem::exists(edges_path)) throw DataError("missing edges.tsv", dir.string());
  const bool have_features = std::filesystem::exists(features_path);
  auto add_id = [&](std::string_view id) {
    auto [it, inserted] = b.index.emplace(std::string(id), static_cast<Index>(b.ids.size()));
    if (inserted) b.ids.emplace_back(id);
    return it->second;
  };

  std::vector<std::vector<double>> feature_rows;
  if (have_features) {
    const std::string file = features_path.string();
    detail::for_each_row(features_path, [&](const auto& f, std::size_t line) {
      if (f.size() < 2) throw DataError("feature row needs a node id and at least one value", file, line);
      if (b.index.count(std::string(f[0]))) throw DataError("duplicate node id '" + std::string(f[0]) + "'", file, line);
      const Index width = static_cast<Index>(f.size() - 1);
      if (b.feature_dim == 0) b.feature_dim = width;
      if (width != b.feature_dim) {
        throw DataError("ragged feature row: " + std::to_string(width) + " values, expected " +
                            std::to_string(b.feature_dim),
                        file, line);
      }
      add_id(f[0]);
      std::vector<double> values;
      values.reserve(f.size() - 1);
      for (std::size_t k = 1; k < f.size(); ++k) values.push_back(detail::parse_double(f[k], file, line));
      feature_rows.push_back(std::move(values));
    });
  }

  std::vector<NodePair> edges;
  std::size_t self_loops = 0;
  {
    const std::string file = edges_path.string();
    detail::for_each_row(edges_path, [&](const auto& f, std::size_t line) {
      if (f.size() != 2) throw DataError("edge line needs exactly two fields", file, line);
      Index ends[2];
      for (int k = 0; k < 2; ++k) {
        auto it = b.index.find(std::string(f[static_cast<std::size_t>(k)]));
        if (it != b.index.end()) {
          ends[k] = it->second;
        } else if (have_features) {
          throw DataError("dangling node id '" + std::string(f[static_cast<std::size_t>(k)]) + "'", file, line);
        } else {
          ends[k] = add_id(f[static_cast<std::size_t>(k)]);
        }
      }
      if (ends[0] == ends[1]) ++self_loops;
      edges.emplace_back(ends[0], ends[1]);
    });
  }

  std::vector<std::pair<Index, std::string>> label_rows;
  if (std::filesystem::exists(labels_path)) {
    const std::string file = labels_path.string();
    std::map<Index, std::size_t> seen;
    detail::for_each_row(labels_path, [&](const auto& f, std::size_t line) {
      if (f.size() != 2) throw DataError("label line needs a node id and a class", file, line);
      auto it = b.index.find(std::string(f[0]));
      Index node;
      if (it != b.index.end()) {
        node = it->second;
      } else if (have_features) {
        throw DataError("dangling node id '" + std::string(f[0]) + "'", file, line);
      } else {
        node = add_id(f[0]);
      }
      if (!seen.emplace(node, line).second) throw DataError("node labeled twice", file, line);
      label_rows.emplace_back(node, std::string(f[1]));
    });
  }

  const auto n = static_cast<Index>(b.ids.size());
  b.graph = Graph::from_edges(n, edges);
  if (self_loops > 0) logging::warn("dropped ", self_loops, " self-loop(s) from ", edges_path.string());
  if (have_features) {
    Matrix x(n, b.feature_dim);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < b.feature_dim; ++j) x(i, j) = feature_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    b.graph.features = std::move(x);
  }
  if (!label_rows.empty()) {
    std::map<std::string, int> classes;
    for (const auto& [node, name] : label_rows) classes.emplace(name, 0);
    for (auto& [name, id] : classes) {
      id = b.class_count++;
      b.class_names.push_back(name);
    }
    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    for (const auto& [node, name] : label_rows) labels[static_cast<std::size_t>(node)] = classes.at(name);
    b.graph.labels = std::move(labels);
  }
  logging::info("ingested ", dir.string(), ": ", n, " nodes, ", b.graph.edge_count(), " edges, ",
                b.feature_dim, " features, ", b.class_count, " classes");
  return b;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  const int len = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(len));
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing", path.string());
  return os;
}

}  // namespace detail

/// Writes a bundle in the layout ingest_citation_dataset reads.
inline void write_dataset(const std::filesystem::path& dir, const DatasetBundle& b) {
  std::filesystem::create_directories(dir);
  {
    auto os = detail::open_out(dir / "edges.tsv");
    for (auto [u, v] : b.graph.edges()) {
      os << b.ids[static_cast<std::size_t>(u)] << '\t' << b.ids[static_cast<std::size_t>(v)] << '\n';
    }
  }
  if (b.graph.features) {
    auto os = detail::open_out(dir / "features.tsv");
    const Matrix& x = *b.graph.features;
    for (Index i = 0; i < x.rows(); ++i) {
      os << b.ids[static_cast<std::size_t>(i)];
      for (Index j = 0; j < x.cols(); ++j) os << '\t' << detail::format_double(x(i, j));
      os << '\n';
    }
  }
  if (b.graph.labels) {
    auto os = detail::open_out(dir / "labels.tsv");
    const auto& l = *b.graph.labels;
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (l[i] < 0) continue;
      os << b.ids[i] << '\t' << b.class_names[static_cast<std::size_t>(l[i])] << '\n';
    }
  }
}

/// "# nodes N" header, then one "u<TAB>v" line per undirected edge.
inline void write_edge_list(const std::filesystem::path& path, const Graph& g) {
  auto os = detail::open_out(path);
  os << "# nodes " << g.node_count() << '\n';
  for (auto [u, v] : g.edges()) os << u << '\t' << v << '\n';
}

inline Graph read_edge_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open", path.string());
  std::string first;
  Index n = -1;
  if (std::getline(is, first) && first.rfind("# nodes ", 0) == 0) {
    n = detail::parse_index(detail::trim(std::string_view(first).substr(8)), path.string(), 1);
  }
  std::vector<NodePair> edges;
  Index max_id = -1;
  detail::for_each_row(path, [&](const auto& f, std::size_t line) {
    if (f.size() != 2) throw DataError("edge line needs exactly two fields", path.string(), line);
    const Index u = detail::parse_index(f[0], path.string(), line), v = detail::parse_index(f[1], path.string(), line);
    if (n >= 0 && (u >= n || v >= n)) throw DataError("node index beyond declared node count", path.string(), line);
    max_id = std::max({max_id, u, v});
    edges.emplace_back(u, v);
  });
  return Graph::from_edges(n >= 0 ? n : max_id + 1, edges);
}

/// n rows of "id<TAB>z_1 ... z_k" with 17 significant digits.
inline void write_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids, const Matrix& z) {
  if (static_cast<Index>(ids.size()) != z.rows()) throw ShapeError("write_embeddings: id count differs from rows");
  auto os = detail::open_out(path);
  for (Index i = 0; i < z.rows(); ++i) {
    os << ids[static_cast<std::size_t>(i)];
    for (Index j = 0; j < z.cols(); ++j) os << '\t' << detail::format_double(z(i, j));
    os << '\n';
  }
}

inline std::pair<std::vector<std::string>, Matrix> read_embeddings(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  detail::for_each_row(path, [&](const auto& f, std::size_t line) {
    if (!rows.empty() && f.size() - 1 != rows.front().size()) throw DataError("ragged embedding row", path.string(), line);
    ids.emplace_back(f[0]);
    std::vector<double> r;
    for (std::size_t k = 1; k < f.size(); ++k) r.push_back(detail::parse_double(f[k], path.string(), line));
    rows.push_back(std::move(r));
  });
  Matrix z(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < z.rows(); ++i)
    for (Index j = 0; j < z.cols(); ++j) z(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return {std::move(ids), std::move(z)};
}

/// Bundle from a bare graph, ids "0".."n-1".
inline DatasetBundle bundle_from_graph(Graph g) {
  DatasetBundle b;
  for (Index i = 0; i < g.node_count(); ++i) {
    b.ids.push_back(std::to_string(i));
    b.index.emplace(b.ids.back(), i);
  }
  b.feature_dim = g.features ? g.features->cols() : 0;
  if (g.labels) {
    int top = -1;
    for (int l : *g.labels) top = std::max(top, l);
    b.class_count = top + 1;
    for (int c = 0; c < b.class_count; ++c) b.class_names.push_back(std::to_string(c));
  }
  b.graph = std::move(g);
  return b;
}

}  // namespace graphite
