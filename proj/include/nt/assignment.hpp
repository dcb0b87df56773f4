#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace nt {

// Minimum-cost perfect matching on a dense n x n cost matrix (row-major).
// Returns col[i], the column assigned to row i. Shortest augmenting path
// with dual potentials, O(n^3).
std::vector<std::size_t> solve_assignment(std::span<const double> cost, std::size_t n);

double assignment_cost(std::span<const double> cost, std::size_t n,
                       std::span<const std::size_t> col_of_row);

}  // namespace nt
