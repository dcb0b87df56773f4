#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nt/fusion.hpp"
#include "nt/pruning.hpp"
#include "oracles.hpp"

using namespace nt;

namespace {

// Exhaustive ranking: norms in double, rounded to float like the stored norm,
// sorted by (norm desc, index asc), top `keep` returned ascending.
std::vector<std::size_t> sort_oracle(const Layer& l, std::size_t keep, bool include_bias) {
  const std::size_t rows = l.weight.dim(0), row = l.weight.size() / rows;
  std::vector<std::pair<float, std::size_t>> ranked;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < row; ++j) s += static_cast<double>(l.weight[r * row + j]) * l.weight[r * row + j];
    if (include_bias) s += static_cast<double>(l.bias[r]) * l.bias[r];
    ranked.emplace_back(static_cast<float>(std::sqrt(s)), r);
  }
  std::sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back(ranked[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

Network random_prunable(RngStream& rng, std::size_t i) {
  if (i % 2 == 0) return oracle::random_mlp(rng, 3 + rng.below(5), 2 + rng.below(3), 1 + rng.below(3), 2 + rng.below(12));
  return oracle::random_conv_net(rng, {2, 6, 6}, 3, 2 + rng.below(5), i % 4 == 1, true, i % 3 == 0);
}

}  // namespace

TEST_CASE("keep count arithmetic") {
  CHECK(keep_count(10, 0.0) == 10);
  CHECK(keep_count(10, 0.5) == 5);
  CHECK(keep_count(10, 0.55) == 5);
  CHECK(keep_count(3, 0.99) == 1);
  for (std::size_t k : {2u, 3u, 4u, 5u, 6u, 7u, 8u})
    for (std::size_t n : {1u, 7u, 64u, 100u}) CHECK(keep_count(k * n, 1.0 - 1.0 / k) == n);
}

TEST_CASE("magnitude prune kept sets match the exhaustive sort oracle on 100 nets") {
  RngStream rng(31, "prune-oracle");
  for (std::size_t i = 0; i < 100; ++i) {
    Network net = random_prunable(rng, i);
    const double s = 0.9 * rng.uniform();
    const bool bias = i % 5 != 0;
    const auto kept = select_units(net, KeepPolicy::with_sparsity(s), bias);
    const auto hidden = net.hidden_layers();
    REQUIRE(kept.size() == hidden.size());
    for (std::size_t h = 0; h < hidden.size(); ++h) {
      const Layer& l = net.layer(hidden[h]);
      CAPTURE(i);
      CHECK(kept[h] == sort_oracle(l, keep_count(l.spec.out, s), bias));
    }
  }
}

TEST_CASE("ties break toward the lower unit index") {
  Network net({2}, {LayerSpec::linear(2, 4), LayerSpec::relu(), LayerSpec::linear(4, 2)});
  net.layer(0).weight = Tensor({4, 2}, {1, 0, 0, 1, -1, 0, 0, 2});
  CHECK(select_units(net, KeepPolicy::with_sparsity(0.5))[0] == std::vector<std::size_t>{0, 3});
  CHECK(select_units(net, KeepPolicy::with_keep_counts({3}))[0] == std::vector<std::size_t>{0, 1, 3});
}

TEST_CASE("ties in a concatenation prefer the earlier member") {
  Network a({2}, {LayerSpec::linear(2, 3), LayerSpec::relu(), LayerSpec::linear(3, 2)});
  a.layer(0).weight = Tensor({3, 2}, {1, 0, 0, 1, 1, 1});
  const std::vector<Network> pair{a, a};
  Network cat = concat_fuse(pair);
  const auto kept = select_units(cat, KeepPolicy::with_sparsity(0.5));
  // Units 2 and 5 share the top norm; among the norm-1 units member 0's first wins.
  CHECK(kept[0] == std::vector<std::size_t>{0, 2, 5});
}

TEST_CASE("prune(concat(k), 1-1/k) restores the member architecture") {
  RngStream rng(32, "restore");
  for (std::size_t k : {2u, 3u, 4u, 8u}) {
    std::vector<Network> mlps, convs;
    for (std::size_t m = 0; m < k; ++m) {
      mlps.push_back(oracle::random_mlp(rng, 5, 3, 3, 6));
      convs.push_back(oracle::random_conv_net(rng, {2, 6, 6}, 3, 3, true, true, true));
    }
    for (auto* members : {&mlps, &convs}) {
      const Network cat = concat_fuse(*members);
      const Network pruned = magnitude_prune(cat, KeepPolicy::with_sparsity(1.0 - 1.0 / k));
      CHECK(pruned.specs() == (*members)[0].specs());
      CHECK(pruned.arch_id() == (*members)[0].arch_id());
      CHECK(prune_to_architecture(cat, (*members)[0]).identical(pruned));
    }
  }
}

TEST_CASE("removing dead units leaves the function unchanged") {
  RngStream rng(33, "dead");
  Network net = oracle::random_mlp(rng, 4, 3, 2, 6);
  for (std::size_t li : net.hidden_layers()) {
    Layer& l = net.layer(li);
    for (std::size_t r : {1u, 4u}) {
      for (std::size_t j = 0; j < l.spec.in; ++j) l.weight.at(r, j) = 0.0f;
      l.bias[r] = 0.0f;
    }
  }
  const Network pruned = magnitude_prune(net, KeepPolicy::with_keep_counts({4, 4}));
  Tensor x = oracle::random_tensor({20, 4}, rng);
  const Tensor a = net.predict(x), b = pruned.predict(x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-6));
}

TEST_CASE("conv pruning moves filters, BN channels and flattened columns together") {
  RngStream rng(34, "convprune");
  Network net = oracle::random_conv_net(rng, {1, 4, 4}, 2, 3, true, false, false, false);
  oracle::randomize_batchnorm(net, rng);
  const std::vector<std::vector<std::size_t>> sel{{2, 0}};
  const Network r = reindex_units(net, sel);
  CHECK(r.layer(0).spec.out == 2);
  CHECK(r.layer(1).running_var[0] == net.layer(1).running_var[2]);
  CHECK(r.layer(1).weight[1] == net.layer(1).weight[0]);
  const std::size_t plane = 16;
  for (std::size_t j = 0; j < plane; ++j) {
    CHECK(r.layer(4).weight.at(1, j) == net.layer(4).weight.at(1, 2 * plane + j));
    CHECK(r.layer(4).weight.at(0, plane + j) == net.layer(4).weight.at(0, j));
  }
}

TEST_CASE("per-member quotas and policy errors") {
  RngStream rng(35, "quota");
  std::vector<Network> members{oracle::random_mlp(rng, 3, 2, 1, 4), oracle::random_mlp(rng, 3, 2, 1, 4)};
  const Network cat = concat_fuse(members);
  const auto kept = select_units(cat, KeepPolicy::with_quotas({{3, 1}}));
  REQUIRE(kept[0].size() == 4);
  CHECK(std::count_if(kept[0].begin(), kept[0].end(), [](std::size_t u) { return u < 4; }) == 3);
  CHECK_THROWS_AS(select_units(cat, KeepPolicy::with_quotas({{5, 0}})), Error);
  CHECK_THROWS_AS(select_units(cat, KeepPolicy::with_keep_counts({0})), Error);
  CHECK_THROWS_AS(select_units(cat, KeepPolicy::with_keep_counts({1, 1})), Error);
  CHECK_THROWS_AS(KeepPolicy::with_sparsity(1.0), Error);
  CHECK_THROWS_AS(prune_to_architecture(members[0], cat), Error);
}
