#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "nt/assignment.hpp"
#include "nt/tensor.hpp"

using namespace nt;

TEST_CASE("assignment is optimal against brute force") {
  RngStream rng(41, "assign");
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + rng.below(7);
    std::vector<double> cost(n * n);
    for (auto& c : cost) c = trial % 3 == 0 ? static_cast<double>(rng.below(3)) : rng.uniform() * 10;
    const auto got = solve_assignment(cost, n);
    std::vector<std::size_t> seen(got);
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> iota(n);
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(seen == iota);
    double best = 1e300;
    std::vector<std::size_t> perm = iota;
    do best = std::min(best, assignment_cost(cost, n, perm));
    while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(assignment_cost(cost, n, got) == doctest::Approx(best));
  }
}

TEST_CASE("assignment recovers a planted permutation") {
  const std::vector<std::size_t> planted{2, 0, 3, 1};
  std::vector<double> cost(16, 5.0);
  for (std::size_t i = 0; i < 4; ++i) cost[i * 4 + planted[i]] = 0.0;
  CHECK(solve_assignment(cost, 4) == planted);
  CHECK_THROWS_AS(solve_assignment(std::vector<double>(5), 2), Error);
}
