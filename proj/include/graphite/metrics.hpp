#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "graphite/errors.hpp"

namespace graphite {

namespace detail {

inline void require_binary(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) throw DataError(std::string(what) + ": scores/labels size mismatch");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError(std::string(what) + ": labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  if (pos == 0 || pos == labels.size()) throw DataError(std::string(what) + ": both classes must be present");
}

}  // namespace detail

/// Mann-Whitney AUC: P(score of random positive > random negative), ties 1/2.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  detail::require_binary(scores, labels, "auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups.
  double pos_rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(scores.size() - n_pos);
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1) / 2.0) / (np * n_neg);
}

/// Mean precision at the rank of each positive, scores descending, ties
/// broken by lower index first.
inline double average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("average_precision: scores/labels size mismatch");
  std::size_t total_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("average_precision: labels must be 0 or 1");
    total_pos += static_cast<std::size_t>(l);
  }
  if (total_pos == 0) throw DataError("average_precision: no positives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] == 1) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(total_pos);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || predicted.empty()) throw DataError("accuracy: size mismatch or empty");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) ok += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(predicted.size());
}

struct MeanSe {
  double mean = 0;
  double se = 0;  // sample standard deviation / sqrt(count); 0 for one value
  std::size_t count = 0;
};

inline MeanSe mean_se(std::span<const double> values) {
  MeanSe out;
  out.count = values.size();
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return out;
}

}  // namespace graphite
