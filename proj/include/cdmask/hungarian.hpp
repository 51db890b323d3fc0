// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

namespace cdmask {

/// Minimum-cost assignment of n_targets rows to n_queries columns
/// (n_targets <= n_queries), classic potential/augmenting-path algorithm.
/// `cost` is row-major [n_targets x n_queries]. Returns the assigned query
/// index for each target. Deterministic: columns are scanned in ascending
/// order, so cost ties resolve toward lower query indices.
std::vector<int> hungarian_match(const std::vector<double>& cost, int n_targets,
                                 int n_queries);

}  // namespace cdmask
