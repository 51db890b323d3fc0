// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include "cdmask/hungarian.hpp"

#include <limits>
#include <stdexcept>

namespace cdmask {

std::vector<int> hungarian_match(const std::vector<double>& cost, int n_targets,
                                 int n_queries) {
  if (n_targets > n_queries)
    throw std::invalid_argument("hungarian_match: more targets than queries");
  if (static_cast<int>(cost.size()) != n_targets * n_queries)
    throw std::invalid_argument("hungarian_match: cost matrix size mismatch");
  if (n_targets == 0) return {};

  const double kInf = std::numeric_limits<double>::infinity();
  const int n = n_targets, m = n_queries;
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);

  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
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
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> assigned(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j]) assigned[p[j] - 1] = j - 1;
  return assigned;
}

}  // namespace cdmask
