#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "transgop/errors.hpp"

namespace transgop {

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, ground truth), sorted by query
  double total_cost = 0;
};

/// Minimum-cost injective assignment between the rows (queries) and columns
/// (ground truths) of a row-major cost matrix. Covers min(rows, cols) pairs.
inline MatchResult hungarian_match(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols) {
  if (cost.size() != rows * cols) throw ShapeError("hungarian_match: cost size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw ContractError("hungarian_match: non-finite cost entry");
  MatchResult res;
  if (rows == 0 || cols == 0) return res;

  // Potentials-based shortest augmenting path; needs n <= m, so work on the
  // transpose when there are more rows than columns.
  const bool flip = rows > cols;
  const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
  auto at = [&](std::size_t i, std::size_t j) {
    return flip ? cost[j * cols + i] : cost[i * cols + j];
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t r = flip ? j - 1 : p[j] - 1;
    const std::size_t c = flip ? p[j] - 1 : j - 1;
    res.pairs.emplace_back(r, c);
  }
  std::sort(res.pairs.begin(), res.pairs.end());
  for (auto [r, c] : res.pairs) res.total_cost += cost[r * cols + c];
  return res;
}

}  // namespace transgop
