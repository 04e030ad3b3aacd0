#pragma once

#include <algorithm>
#include <map>
#include <utility>
#include <vector>

#include "graphite/graph.hpp"

namespace graphite {

enum class WlVerdict { isomorphic_candidate, not_isomorphic };

struct WlResult {
  WlVerdict verdict = WlVerdict::isomorphic_candidate;
  /// labels[l][node] for iteration l = 0..iterations, per graph.
  std::vector<std::vector<long>> history_first;
  std::vector<std::vector<long>> history_second;
  int iterations = 0;
};

/// 1-dim Weisfeiler-Lehman colour refinement run jointly on two graphs.
///
/// Nodes start from their degree. Each round relabels a node by the pair
/// (own label, sorted neighbour labels) through a dictionary shared by both
/// graphs, so equal labels mean equal refinement histories. The graphs are
/// declared non-isomorphic as soon as their sorted label multisets differ.
inline WlResult wl_test(const Graph& g1, const Graph& g2, int max_iters = 10) {
  if (g1.node_count() == 0 || g2.node_count() == 0) {
    throw DataError("wl_test: graphs must be non-empty");
  }
  WlResult result;
  auto initial = [](const Graph& g) {
    Vector d = g.degrees();
    std::vector<long> labels(static_cast<std::size_t>(g.node_count()));
    for (Index i = 0; i < g.node_count(); ++i) labels[static_cast<std::size_t>(i)] = std::lround(d(i));
    return labels;
  };
  std::vector<long> l1 = initial(g1), l2 = initial(g2);
  result.history_first.push_back(l1);
  result.history_second.push_back(l2);

  auto sorted = [](std::vector<long> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  auto distinct = [&](const std::vector<long>& v) {
    auto s = sorted(v);
    return static_cast<std::size_t>(std::unique(s.begin(), s.end()) - s.begin());
  };

  if (g1.node_count() != g2.node_count() || sorted(l1) != sorted(l2)) {
    result.verdict = WlVerdict::not_isomorphic;
    return result;
  }

  const auto n1 = g1.neighbor_lists();
  const auto n2 = g2.neighbor_lists();
  for (int iter = 1; iter <= max_iters; ++iter) {
    std::map<std::pair<long, std::vector<long>>, long> dictionary;
    auto relabel = [&](const std::vector<std::vector<Index>>& nbrs, const std::vector<long>& old) {
      std::vector<long> fresh(old.size());
      for (std::size_t i = 0; i < old.size(); ++i) {
        std::vector<long> multiset;
        for (Index j : nbrs[i]) multiset.push_back(old[static_cast<std::size_t>(j)]);
        std::sort(multiset.begin(), multiset.end());
        auto key = std::make_pair(old[i], std::move(multiset));
        auto it = dictionary.find(key);
        if (it == dictionary.end()) {
          it = dictionary.emplace(std::move(key), static_cast<long>(dictionary.size())).first;
        }
        fresh[i] = it->second;
      }
      return fresh;
    };
    auto f1 = relabel(n1, l1);
    auto f2 = relabel(n2, l2);
    result.iterations = iter;
    result.history_first.push_back(f1);
    result.history_second.push_back(f2);
    if (sorted(f1) != sorted(f2)) {
      result.verdict = WlVerdict::not_isomorphic;
      return result;
    }
    const bool stable = distinct(f1) == distinct(l1) && distinct(f2) == distinct(l2);
    l1 = std::move(f1);
    l2 = std::move(f2);
    if (stable) break;
  }
  return result;
}

}  // namespace graphite
