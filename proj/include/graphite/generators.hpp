#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "graphite/graph.hpp"

namespace graphite {

enum class GraphFamily { erdos_renyi, ego, regular, geometric, powerlaw_tree, barabasi_albert };

inline constexpr std::array<GraphFamily, 6> kAllFamilies = {
    GraphFamily::erdos_renyi, GraphFamily::ego,          GraphFamily::regular,
    GraphFamily::geometric,   GraphFamily::powerlaw_tree, GraphFamily::barabasi_albert};

inline std::string_view to_string(GraphFamily f) {
  switch (f) {
    case GraphFamily::erdos_renyi: return "erdos_renyi";
    case GraphFamily::ego: return "ego";
    case GraphFamily::regular: return "regular";
    case GraphFamily::geometric: return "geometric";
    case GraphFamily::powerlaw_tree: return "powerlaw_tree";
    case GraphFamily::barabasi_albert: return "barabasi_albert";
  }
  return "unknown";
}

inline GraphFamily parse_family(std::string_view name) {
  for (GraphFamily f : kAllFamilies) {
    if (to_string(f) == name) return f;
  }
  if (name == "er") return GraphFamily::erdos_renyi;
  if (name == "ba") return GraphFamily::barabasi_albert;
  throw ConfigError("unknown graph family '" + std::string(name) + "'");
}

struct GeneratorParams {
  double edge_probability = 0.5;  // erdos_renyi, ego
  int degree = 4;                 // regular
  double radius = 0.5;            // geometric
  double exponent = 3.0;          // powerlaw_tree
  int attachments = 4;            // barabasi_albert
  int max_retries = 1000;
};

inline Graph erdos_renyi(Index n, double p, Rng& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<NodePair> edges;
  for (Index u = 0; u < n; ++u) {
    for (Index v = u + 1; v < n; ++v) {
      if (coin(rng)) edges.emplace_back(u, v);
    }
  }
  return Graph::from_edges(n, edges);
}

/// Erdos-Renyi graph plus one uniformly chosen centre adjacent to every node.
inline Graph ego_network(Index n, double p, Rng& rng) {
  Graph base = erdos_renyi(n, p, rng);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  const Index centre = pick(rng);
  auto edges = base.edges();
  for (Index v = 0; v < n; ++v) {
    if (v != centre) edges.emplace_back(std::min(v, centre), std::max(v, centre));
  }
  return Graph::from_edges(n, edges);
}

/// Pairing model with whole-configuration rejection of loops and multi-edges.
inline Graph random_regular(Index n, int d, Rng& rng, int max_retries = 1000) {
  if ((static_cast<long>(n) * d) % 2 != 0) {
    throw DataError("random_regular: n*d must be even (n=" + std::to_string(n) +
                    ", d=" + std::to_string(d) + ")");
  }
  if (d >= n) throw DataError("random_regular: degree must be below n");
  std::vector<Index> stubs;
  for (Index v = 0; v < n; ++v) stubs.insert(stubs.end(), static_cast<std::size_t>(d), v);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::shuffle(stubs.begin(), stubs.end(), rng);
    std::set<NodePair> edges;
    bool ok = true;
    for (std::size_t k = 0; k + 1 < stubs.size(); k += 2) {
      Index u = stubs[k], v = stubs[k + 1];
      if (u == v) { ok = false; break; }
      if (u > v) std::swap(u, v);
      if (!edges.emplace(u, v).second) { ok = false; break; }
    }
    if (ok) {
      std::vector<NodePair> list(edges.begin(), edges.end());
      return Graph::from_edges(n, list);
    }
  }
  throw DataError("random_regular: retry budget exhausted");
}

struct GeometricGraph {
  Graph graph;
  std::vector<std::array<double, 2>> points;
};

/// Uniform points in the unit square, edge iff Euclidean distance < radius.
inline GeometricGraph random_geometric(Index n, double radius, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  GeometricGraph out;
  for (Index v = 0; v < n; ++v) {
    const double x = unit(rng);
    const double y = unit(rng);
    out.points.push_back({x, y});
  }
  std::vector<NodePair> edges;
  for (Index u = 0; u < n; ++u) {
    for (Index v = u + 1; v < n; ++v) {
      const auto& a = out.points[static_cast<std::size_t>(u)];
      const auto& b = out.points[static_cast<std::size_t>(v)];
      if (std::hypot(a[0] - b[0], a[1] - b[1]) < radius) edges.emplace_back(u, v);
    }
  }
  out.graph = Graph::from_edges(n, edges);
  return out;
}

/// Tree whose degree sequence follows a power law with the given exponent.
///
/// Degrees are rounded Pareto draws (density ~ x^-exponent), clipped to
/// [1, n-1]. Random entries are redrawn until the sequence sums to 2(n-1),
/// then a Pruefer sequence holding node v exactly deg(v)-1 times is shuffled
/// and decoded into the tree.
inline Graph random_powerlaw_tree(Index n, double exponent, Rng& rng, int max_retries = 1000) {
  if (n < 2) return Graph(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&]() {
    const double x = std::pow(1.0 - unit(rng), -1.0 / (exponent - 1.0));
    return std::clamp<long>(std::lround(x), 1, static_cast<long>(n - 1));
  };
  const long target = 2 * static_cast<long>(n - 1);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<long> degree(static_cast<std::size_t>(n));
    for (auto& d : degree) d = draw();
    long sum = 0;
    for (long d : degree) sum += d;
    for (int swap = 0; swap < 10000 && sum != target; ++swap) {
      const auto k = static_cast<std::size_t>(pick(rng));
      sum -= degree[k];
      degree[k] = draw();
      sum += degree[k];
    }
    if (sum != target) continue;

    std::vector<Index> prufer;
    for (Index v = 0; v < n; ++v) {
      prufer.insert(prufer.end(), static_cast<std::size_t>(degree[static_cast<std::size_t>(v)] - 1), v);
    }
    std::shuffle(prufer.begin(), prufer.end(), rng);
    std::vector<long> remaining = degree;
    std::set<Index> leaves;
    for (Index v = 0; v < n; ++v) {
      if (remaining[static_cast<std::size_t>(v)] == 1) leaves.insert(v);
    }
    std::vector<NodePair> edges;
    for (Index v : prufer) {
      const Index leaf = *leaves.begin();
      leaves.erase(leaves.begin());
      edges.emplace_back(std::min(leaf, v), std::max(leaf, v));
      if (--remaining[static_cast<std::size_t>(v)] == 1) leaves.insert(v);
    }
    const Index a = *leaves.begin();
    const Index b = *std::next(leaves.begin());
    edges.emplace_back(std::min(a, b), std::max(a, b));
    return Graph::from_edges(n, edges);
  }
  throw DataError("random_powerlaw_tree: retry budget exhausted");
}

/// Preferential attachment from m isolated seed nodes. Node m links to all
/// seeds; each later node links to m distinct targets drawn proportionally
/// to degree, giving exactly (n - m) * m edges.
inline Graph barabasi_albert(Index n, int m, Rng& rng) {
  if (m < 1 || m >= n) throw DataError("barabasi_albert: need 1 <= m < n");
  std::vector<NodePair> edges;
  std::vector<Index> repeated;
  std::vector<Index> targets;
  for (Index v = 0; v < m; ++v) targets.push_back(v);
  for (Index source = m; source < n; ++source) {
    for (Index t : targets) {
      edges.emplace_back(std::min(source, t), std::max(source, t));
      repeated.push_back(t);
      repeated.push_back(source);
    }
    std::set<Index> chosen;
    std::uniform_int_distribution<std::size_t> pick(0, repeated.size() - 1);
    while (static_cast<int>(chosen.size()) < m) chosen.insert(repeated[pick(rng)]);
    targets.assign(chosen.begin(), chosen.end());
  }
  return Graph::from_edges(n, edges);
}

inline Graph generate(GraphFamily family, Index n, Rng& rng, const GeneratorParams& params = {}) {
  switch (family) {
    case GraphFamily::erdos_renyi: return erdos_renyi(n, params.edge_probability, rng);
    case GraphFamily::ego: return ego_network(n, params.edge_probability, rng);
    case GraphFamily::regular: return random_regular(n, params.degree, rng, params.max_retries);
    case GraphFamily::geometric: return random_geometric(n, params.radius, rng).graph;
    case GraphFamily::powerlaw_tree:
      return random_powerlaw_tree(n, params.exponent, rng, params.max_retries);
    case GraphFamily::barabasi_albert: return barabasi_albert(n, params.attachments, rng);
  }
  throw ConfigError("generate: unknown family");
}

inline Graph generate(GraphFamily family, Index n, std::uint64_t seed,
                      const GeneratorParams& params = {}) {
  Rng rng(seed);
  return generate(family, n, rng, params);
}

}  // namespace graphite
