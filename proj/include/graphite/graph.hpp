#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "graphite/errors.hpp"
#include "graphite/log.hpp"
#include "graphite/tensor.hpp"

namespace graphite {

using Rng = std::mt19937_64;
using NodePair = std::pair<Index, Index>;

/// Undirected graph with symmetric adjacency and optional node data.
class Graph {
 public:
  Graph() = default;
  explicit Graph(Index n) : n_(n), adjacency_(n, n) {}

  /// Builds an unweighted graph. Duplicates (in either direction) are merged,
  /// self-loops are dropped.
  static Graph from_edges(Index n, std::span<const NodePair> edges,
                          std::size_t* dropped_self_loops = nullptr) {
    std::set<NodePair> unique;
    std::size_t loops = 0;
    for (auto [u, v] : edges) {
      if (u < 0 || v < 0 || u >= n || v >= n) {
        throw DataError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                        ") references a node outside [0, " + std::to_string(n) + ")");
      }
      if (u == v) {
        ++loops;
        continue;
      }
      unique.emplace(std::min(u, v), std::max(u, v));
    }
    if (dropped_self_loops != nullptr) *dropped_self_loops = loops;
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(unique.size() * 2);
    for (auto [u, v] : unique) {
      triplets.emplace_back(u, v, 1.0);
      triplets.emplace_back(v, u, 1.0);
    }
    Graph g(n);
    g.adjacency_.setFromTriplets(triplets.begin(), triplets.end());
    g.adjacency_.makeCompressed();
    return g;
  }

  static Graph from_edges(Index n, const std::vector<NodePair>& edges) {
    return from_edges(n, std::span<const NodePair>(edges));
  }

  /// Accepts any symmetric non-negative matrix with zero diagonal.
  static Graph from_dense(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeError("graph adjacency must be square");
    return from_sparse(a.sparseView());
  }

  static Graph from_sparse(SparseMatrix a) {
    if (a.rows() != a.cols()) throw ShapeError("graph adjacency must be square");
    a.prune(0.0);
    SparseMatrix asym = a - SparseMatrix(a.transpose());
    asym.prune(0.0);
    if (asym.nonZeros() > 0) throw DataError("graph adjacency must be symmetric");
    for (Index k = 0; k < a.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(a, k); it; ++it) {
        if (it.value() < 0) throw DataError("graph adjacency must be non-negative");
        if (it.row() == it.col()) throw DataError("graph adjacency must have a zero diagonal");
      }
    }
    Graph g(a.rows());
    g.adjacency_ = std::move(a);
    g.adjacency_.makeCompressed();
    return g;
  }

  Index node_count() const { return n_; }
  std::size_t edge_count() const { return static_cast<std::size_t>(adjacency_.nonZeros()) / 2; }
  const SparseMatrix& adjacency() const { return adjacency_; }
  Matrix dense_adjacency() const { return Matrix(adjacency_); }

  bool is_unweighted() const {
    for (Index k = 0; k < adjacency_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(adjacency_, k); it; ++it) {
        if (it.value() != 1.0) return false;
      }
    }
    return true;
  }

  /// Undirected edges as (u, v) with u < v, sorted.
  std::vector<NodePair> edges() const {
    std::vector<NodePair> out;
    out.reserve(edge_count());
    for (Index k = 0; k < adjacency_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(adjacency_, k); it; ++it) {
        if (it.row() < it.col()) out.emplace_back(it.row(), it.col());
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  bool has_edge(Index u, Index v) const { return adjacency_.coeff(u, v) != 0.0; }

  Vector degrees() const {
    Vector d = Vector::Zero(n_);
    for (Index k = 0; k < adjacency_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(adjacency_, k); it; ++it) d(it.col()) += it.value();
    }
    return d;
  }

  std::vector<std::vector<Index>> neighbor_lists() const {
    std::vector<std::vector<Index>> nbrs(static_cast<std::size_t>(n_));
    for (Index k = 0; k < adjacency_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(adjacency_, k); it; ++it) {
        nbrs[static_cast<std::size_t>(it.col())].push_back(it.row());
      }
    }
    for (auto& list : nbrs) std::sort(list.begin(), list.end());
    return nbrs;
  }

  /// Optional n x m node features.
  std::optional<Matrix> features;
  /// Optional class id per node.
  std::optional<std::vector<int>> labels;

 private:
  Index n_ = 0;
  SparseMatrix adjacency_;
};

/// D^{-1/2} A D^{-1/2}; zero-degree rows/columns stay zero. With
/// `add_self_loops` the input is A + I (renormalization trick).
inline SparseMatrix normalize_sym(const SparseMatrix& a, bool add_self_loops = false) {
  SparseMatrix m = a;
  if (add_self_loops) {
    SparseMatrix eye(a.rows(), a.cols());
    eye.setIdentity();
    m = m + eye;
  }
  Vector deg = Vector::Zero(m.rows());
  for (Index k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) deg(it.row()) += it.value();
  }
  Vector inv_sqrt = deg.unaryExpr([](double d) { return d > 0 ? 1.0 / std::sqrt(d) : 0.0; });
  for (Index k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
      it.valueRef() *= inv_sqrt(it.row()) * inv_sqrt(it.col());
    }
  }
  m.prune(0.0);
  m.makeCompressed();
  return m;
}

inline SparseMatrix normalize_sym(const Graph& g, bool add_self_loops = false) {
  return normalize_sym(g.adjacency(), add_self_loops);
}

inline Matrix normalize_sym_dense(const Matrix& a, bool add_self_loops = false) {
  Matrix m = add_self_loops ? Matrix(a + Matrix::Identity(a.rows(), a.cols())) : a;
  Vector deg = m.rowwise().sum();
  Vector inv_sqrt = deg.unaryExpr([](double d) { return d > 0 ? 1.0 / std::sqrt(d) : 0.0; });
  return inv_sqrt.asDiagonal() * m * inv_sqrt.asDiagonal();
}

/// Subgraph induced on `nodes` (in the given order); node data is carried over.
inline Graph induced_subgraph(const Graph& g, std::span<const Index> nodes) {
  std::vector<Index> position(static_cast<std::size_t>(g.node_count()), -1);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    position[static_cast<std::size_t>(nodes[k])] = static_cast<Index>(k);
  }
  std::vector<Eigen::Triplet<double>> triplets;
  const SparseMatrix& a = g.adjacency();
  for (Index k = 0; k < a.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(a, k); it; ++it) {
      const Index pu = position[static_cast<std::size_t>(it.row())];
      const Index pv = position[static_cast<std::size_t>(it.col())];
      if (pu >= 0 && pv >= 0) triplets.emplace_back(pu, pv, it.value());
    }
  }
  const auto n = static_cast<Index>(nodes.size());
  SparseMatrix sub(n, n);
  sub.setFromTriplets(triplets.begin(), triplets.end());
  Graph out = Graph::from_sparse(std::move(sub));
  if (g.features) {
    Matrix f(n, g.features->cols());
    for (Index k = 0; k < n; ++k) f.row(k) = g.features->row(nodes[static_cast<std::size_t>(k)]);
    out.features = std::move(f);
  }
  if (g.labels) {
    std::vector<int> l;
    for (Index v : nodes) l.push_back((*g.labels)[static_cast<std::size_t>(v)]);
    out.labels = std::move(l);
  }
  return out;
}

/// Connected components, each sorted, ordered by their smallest node.
inline std::vector<std::vector<Index>> connected_components(const Graph& g) {
  const auto nbrs = g.neighbor_lists();
  std::vector<bool> seen(nbrs.size(), false);
  std::vector<std::vector<Index>> components;
  for (std::size_t s = 0; s < nbrs.size(); ++s) {
    if (seen[s]) continue;
    std::vector<Index> comp;
    std::deque<Index> queue{static_cast<Index>(s)};
    seen[s] = true;
    while (!queue.empty()) {
      const Index u = queue.front();
      queue.pop_front();
      comp.push_back(u);
      for (Index v : nbrs[static_cast<std::size_t>(u)]) {
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          queue.push_back(v);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    components.push_back(std::move(comp));
  }
  return components;
}

inline bool is_connected(const Graph& g) {
  return g.node_count() > 0 && connected_components(g).size() == 1;
}

/// Node set of the largest component; ties go to the component containing
/// the smallest original index.
inline std::vector<Index> largest_component_nodes(const Graph& g) {
  if (g.node_count() == 0) throw DataError("largest_connected_component: empty graph");
  auto comps = connected_components(g);
  std::size_t best = 0;
  for (std::size_t k = 1; k < comps.size(); ++k) {
    if (comps[k].size() > comps[best].size()) best = k;
  }
  return comps[best];
}

inline Graph largest_connected_component(const Graph& g) {
  const auto nodes = largest_component_nodes(g);
  if (static_cast<Index>(nodes.size()) == g.node_count()) return g;
  return induced_subgraph(g, nodes);
}

/// Appends isolated dummy nodes (zero adjacency, zero features) up to n_max.
inline Graph pad_with_dummy_nodes(const Graph& g, Index n_max) {
  if (g.node_count() > n_max) {
    throw DataError("pad_with_dummy_nodes: graph has " + std::to_string(g.node_count()) +
                    " nodes, more than n_max = " + std::to_string(n_max));
  }
  if (g.node_count() == n_max) return g;
  SparseMatrix padded = g.adjacency();
  padded.conservativeResize(n_max, n_max);
  Graph out = Graph::from_sparse(std::move(padded));
  if (g.features) {
    Matrix f = Matrix::Zero(n_max, g.features->cols());
    f.topRows(g.node_count()) = *g.features;
    out.features = std::move(f);
  }
  if (g.labels) {
    std::vector<int> l = *g.labels;
    l.resize(static_cast<std::size_t>(n_max), -1);
    out.labels = std::move(l);
  }
  return out;
}

struct EdgeSplit {
  Graph train_graph;
  std::vector<NodePair> val_pos;
  std::vector<NodePair> val_neg;
  std::vector<NodePair> test_pos;
  std::vector<NodePair> test_neg;
};

namespace detail {

/// Uniform spanning tree by Wilson's loop-erased random walks.
inline std::vector<NodePair> uniform_spanning_tree(const std::vector<std::vector<Index>>& nbrs,
                                                   Rng& rng) {
  const std::size_t n = nbrs.size();
  std::vector<bool> in_tree(n, false);
  std::vector<Index> next(n, -1);
  std::uniform_int_distribution<std::size_t> pick_root(0, n - 1);
  in_tree[pick_root(rng)] = true;
  for (std::size_t start = 0; start < n; ++start) {
    std::size_t u = start;
    while (!in_tree[u]) {
      const auto& list = nbrs[u];
      std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
      next[u] = list[pick(rng)];
      u = static_cast<std::size_t>(next[u]);
    }
    u = start;
    while (!in_tree[u]) {
      in_tree[u] = true;
      u = static_cast<std::size_t>(next[u]);
    }
  }
  std::vector<NodePair> tree;
  for (std::size_t v = 0; v < n; ++v) {
    if (next[v] >= 0) {
      const auto a = static_cast<Index>(v);
      tree.emplace_back(std::min(a, next[v]), std::max(a, next[v]));
    }
  }
  std::sort(tree.begin(), tree.end());
  tree.erase(std::unique(tree.begin(), tree.end()), tree.end());
  return tree;
}

inline std::size_t fraction_count(std::size_t total, double frac) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(total) * frac + 1e-9));
}

}  // namespace detail

/// Holds out val/test positive edges (never from a uniformly random spanning
/// tree, so the training graph stays connected) plus equally many non-edges
/// of the original graph.
inline EdgeSplit split_edges(const Graph& g, double val_frac, double test_frac, Rng& rng) {
  if (val_frac < 0 || test_frac < 0 || val_frac + test_frac >= 1) {
    throw ConfigError("split_edges: fractions must be non-negative and sum below 1");
  }
  EdgeSplit split;
  const auto all_edges = g.edges();
  const std::size_t n_val = detail::fraction_count(all_edges.size(), val_frac);
  const std::size_t n_test = detail::fraction_count(all_edges.size(), test_frac);
  if (n_val + n_test == 0) {
    split.train_graph = g;
    return split;
  }
  if (!is_connected(g)) throw DataError("split_edges: input graph must be connected");

  const auto nbrs = g.neighbor_lists();
  const auto tree = detail::uniform_spanning_tree(nbrs, rng);
  std::vector<NodePair> candidates;
  std::set_difference(all_edges.begin(), all_edges.end(), tree.begin(), tree.end(),
                      std::back_inserter(candidates));
  if (candidates.size() < n_val + n_test) {
    throw DataError("split_edges: only " + std::to_string(candidates.size()) +
                    " edges can be held out without disconnecting the graph, need " +
                    std::to_string(n_val + n_test));
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  split.val_pos.assign(candidates.begin(), candidates.begin() + static_cast<long>(n_val));
  split.test_pos.assign(candidates.begin() + static_cast<long>(n_val),
                        candidates.begin() + static_cast<long>(n_val + n_test));

  const Index n = g.node_count();
  const double possible = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  if (possible - static_cast<double>(all_edges.size()) < static_cast<double>(n_val + n_test)) {
    throw DataError("split_edges: not enough non-edges for negative samples");
  }
  std::set<NodePair> used;
  std::uniform_int_distribution<Index> pick(0, n - 1);
  auto sample_negatives = [&](std::size_t count, std::vector<NodePair>& out) {
    std::size_t attempts = 0;
    const std::size_t budget = 1000 * (count + 10) + static_cast<std::size_t>(n) * n;
    while (out.size() < count) {
      if (++attempts > budget) throw DataError("split_edges: negative sampling budget exhausted");
      Index u = pick(rng), v = pick(rng);
      if (u == v) continue;
      if (u > v) std::swap(u, v);
      if (g.has_edge(u, v) || !used.emplace(u, v).second) continue;
      out.emplace_back(u, v);
    }
  };
  sample_negatives(n_val, split.val_neg);
  sample_negatives(n_test, split.test_neg);

  std::set<NodePair> held(split.val_pos.begin(), split.val_pos.end());
  held.insert(split.test_pos.begin(), split.test_pos.end());
  std::vector<NodePair> train_edges;
  for (const auto& e : all_edges) {
    if (!held.count(e)) train_edges.push_back(e);
  }
  split.train_graph = Graph::from_edges(n, train_edges);
  split.train_graph.features = g.features;
  split.train_graph.labels = g.labels;
  return split;
}

inline EdgeSplit split_edges(const Graph& g, double val_frac, double test_frac,
                             std::uint64_t seed) {
  Rng rng(seed);
  return split_edges(g, val_frac, test_frac, rng);
}

}  // namespace graphite
