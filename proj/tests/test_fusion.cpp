#include <doctest.h>

#include <cmath>

#include "nt/fusion.hpp"
#include "nt/pruning.hpp"
#include "oracles.hpp"

using namespace nt;

namespace {

double max_rel_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  }
  return worst;
}

Tensor mean_output(const std::vector<Network>& members, const Tensor& x) {
  Tensor sum = members[0].predict(x);
  for (std::size_t m = 1; m < members.size(); ++m) {
    const Tensor o = members[m].predict(x);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += o[i];
  }
  for (float& v : sum.values()) v /= static_cast<float>(members.size());
  return sum;
}

}  // namespace

TEST_CASE("concat of two small MLPs has the stacked shapes and averages outputs") {
  RngStream rng(51, "concat");
  std::vector<Network> members{oracle::random_mlp(rng, 4, 2, 1, 3), oracle::random_mlp(rng, 4, 2, 1, 3)};
  const Network cat = concat_fuse(members);
  CHECK(cat.layer(0).weight.shape() == Shape{6, 4});
  CHECK(cat.layer(2).weight.shape() == Shape{2, 6});
  CHECK(cat.layer(0).origin == std::vector<int>{0, 0, 0, 1, 1, 1});
  Tensor x = oracle::random_tensor({50, 4}, rng);
  CHECK(max_rel_diff(cat.predict(x), mean_output(members, x)) <= 1e-5);
}

TEST_CASE("interior cross weights are exactly zero and parameter counts follow the arithmetic") {
  RngStream rng(52, "cross");
  for (std::size_t k : {2u, 3u, 5u}) {
    std::vector<Network> members;
    for (std::size_t m = 0; m < k; ++m) members.push_back(oracle::random_mlp(rng, 7, 3, 2, 4));
    const Network cat = concat_fuse(members);
    const Tensor& w = cat.layer(2).weight;  // interior 4k x 4k
    REQUIRE(w.shape() == Shape{4 * k, 4 * k});
    for (std::size_t r = 0; r < 4 * k; ++r)
      for (std::size_t c = 0; c < 4 * k; ++c) {
        if (r / 4 == c / 4) {
          CHECK(w.at(r, c) == members[r / 4].layer(2).weight.at(r % 4, c % 4));
        } else {
          CHECK(w.at(r, c) == 0.0f);
        }
      }
    const std::size_t expected = (k * 4 * 7 + k * 4) + (k * 4 * k * 4 + k * 4) + (3 * k * 4 + 3);
    CHECK(cat.parameter_count() == expected);
  }
}

TEST_CASE("conv concatenation widens channels, BN stats and flattened columns") {
  RngStream rng(53, "convcat");
  std::vector<Network> members;
  for (int m = 0; m < 3; ++m) {
    members.push_back(oracle::random_conv_net(rng, {2, 6, 6}, 3, 2, true, true, true));
    oracle::randomize_batchnorm(members.back(), rng);
  }
  const Network cat = concat_fuse(members);
  CHECK(cat.layer(0).spec.out == 6);
  CHECK(cat.layer(3).spec.in == 6);
  CHECK(cat.layer(3).spec.out == 9);
  CHECK(cat.layer(1).running_mean[3] == members[1].layer(1).running_mean[1]);
  // Cross-channel kernels of the interior conv are zero.
  const Tensor& w = cat.layer(3).weight;
  for (std::size_t o = 0; o < 9; ++o)
    for (std::size_t i = 0; i < 6; ++i)
      if (o / 3 != i / 2)
        for (std::size_t t = 0; t < 9; ++t) CHECK(w[(o * 6 + i) * 9 + t] == 0.0f);
  Tensor x = oracle::random_tensor({10, 2, 6, 6}, rng);
  CHECK(max_rel_diff(cat.predict(x), mean_output(members, x)) <= 1e-5);
}

TEST_CASE("k copies of one net fuse to the same function") {
  RngStream rng(54, "copies");
  Network m = oracle::random_conv_net(rng, {1, 5, 5}, 3, 2, true, false, true, false);
  const std::vector<Network> copies(4, m);
  Tensor x = oracle::random_tensor({8, 1, 5, 5}, rng);
  CHECK(max_rel_diff(concat_fuse(copies).predict(x), m.predict(x)) <= 1e-6);
}

TEST_CASE("concat rejects mismatched architectures and single members") {
  RngStream rng(55, "mismatch");
  std::vector<Network> members{oracle::random_mlp(rng, 4, 2, 1, 3), oracle::random_mlp(rng, 4, 2, 1, 5)};
  try {
    concat_fuse(members);
    FAIL("expected ArchMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ArchMismatch);
  }
  CHECK_THROWS_AS(concat_fuse(std::vector<Network>{members[0]}), Error);
  CHECK_THROWS_AS(vanilla_average(members), Error);
}

TEST_CASE("vanilla averaging") {
  RngStream rng(56, "avg");
  Network a = oracle::random_conv_net(rng, {1, 5, 5}, 3, 2, true, true, true, false);
  oracle::randomize_batchnorm(a, rng);
  Network b = a;
  oracle::randomize_batchnorm(b, rng);
  for (Layer& l : b.layers())
    if (l.spec.parameterized()) l.weight = oracle::random_tensor(l.weight.shape(), rng);

  CHECK(vanilla_average(std::vector<Network>{a, a}).identical(a));

  Network neg = a;
  for (Layer& l : neg.layers())
    if (l.spec.parameterized()) {
      for (float& v : l.weight.values()) v = -v;
      for (float& v : l.bias.values()) v = -v;
    }
  const Network zero = vanilla_average(std::vector<Network>{a, neg});
  for (const Layer& l : zero.layers())
    if (l.spec.parameterized()) {
      for (float v : l.weight.values()) CHECK(v == 0.0f);
    }

  const std::vector<Network> three{a, b, neg};
  const Network avg = vanilla_average(three);
  for (std::size_t li = 0; li < a.size(); ++li) {
    const auto check = [&](Tensor Layer::*f) {
      const Tensor& got = avg.layer(li).*f;
      for (std::size_t i = 0; i < got.size(); ++i) {
        float s = 0.0f;
        for (const Network& n : three) s += (n.layer(li).*f)[i];
        CHECK(got[i] == s / 3.0f);
      }
    };
    check(&Layer::weight);
    check(&Layer::bias);
    check(&Layer::running_mean);
    check(&Layer::running_var);
  }
}

TEST_CASE("align-average recovers a permuted copy exactly") {
  RngStream rng(57, "align");
  for (int trial = 0; trial < 5; ++trial) {
    Network a = oracle::random_mlp(rng, 5, 3, 3, 6);
    // Permute hidden units of every layer consistently.
    std::vector<std::vector<std::size_t>> perms;
    for (std::size_t h = 0; h < 3; ++h) {
      std::vector<std::size_t> p(6);
      for (std::size_t i = 0; i < 6; ++i) p[i] = i;
      for (std::size_t i = 6; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
      perms.push_back(p);
    }
    const Network b = reindex_units(a, perms);
    Tensor x = oracle::random_tensor({10, 5}, rng);
    CHECK(max_rel_diff(b.predict(x), a.predict(x)) <= 1e-5);
    const auto r = align_to(a, b);
    CHECK(r.cost == doctest::Approx(0.0));
    CHECK(align_average(a, b).identical(a));
    CHECK(align_average(a, a).identical(a));
  }
}

TEST_CASE("alignment cost never exceeds the identity matching") {
  RngStream rng(58, "aligncost");
  for (int trial = 0; trial < 10; ++trial) {
    Network a = oracle::random_mlp(rng, 4, 3, 2, 5);
    Network b = oracle::random_mlp(rng, 4, 3, 2, 5);
    const auto r = align_to(a, b);
    CHECK(r.cost <= r.identity_cost + 1e-9);
    Tensor x = oracle::random_tensor({10, 4}, rng);
    CHECK(max_rel_diff(r.aligned.predict(x), b.predict(x)) <= 1e-5);
  }
}

TEST_CASE("transplant endpoints and unit bookkeeping") {
  RngStream rng(59, "transplant");
  Network r = oracle::random_conv_net(rng, {1, 6, 6}, 3, 4, true, true, true);
  Network d = oracle::random_conv_net(rng, {1, 6, 6}, 3, 4, true, true, true);
  oracle::randomize_batchnorm(r, rng);
  oracle::randomize_batchnorm(d, rng);
  CHECK(transplant_fraction(r, d, 0.0).identical(r));
  CHECK(transplant_fraction(r, d, 0.0, true).layer(r.head_index()).weight.size() > 0);
  const Network full = transplant_fraction(r, d, 1.0, true);
  for (std::size_t li = 0; li < r.size(); ++li) {
    CHECK(full.layer(li).weight.identical(d.layer(li).weight));
    CHECK(full.layer(li).bias.identical(d.layer(li).bias));
    CHECK(full.layer(li).running_var.identical(d.layer(li).running_var));
  }
  CHECK(transplant_fraction(r, d, 1.0).layer(r.head_index()).bias.identical(r.layer(r.head_index()).bias));

  Network a = oracle::random_mlp(rng, 3, 2, 2, 4);
  Network b = oracle::random_mlp(rng, 3, 2, 2, 4);
  const Network half = transplant_fraction(a, b, 0.5);
  // Two units moved per layer; their incoming rows come from b and cross weights vanish.
  std::size_t from_donor = 0;
  for (std::size_t u = 0; u < 4; ++u) {
    bool donor_row = false;
    for (std::size_t v = 0; v < 4; ++v) {
      bool same = true;
      for (std::size_t j = 0; j < 3; ++j) same &= half.layer(0).weight.at(u, j) == b.layer(0).weight.at(v, j);
      donor_row |= same;
    }
    from_donor += donor_row;
  }
  CHECK(from_donor == 2);
  CHECK_THROWS_AS(transplant_fraction(a, b, 1.5), Error);
}

TEST_CASE("at k=2 every NT scheme coincides") {
  RngStream rng(60, "k2");
  std::vector<Network> members{oracle::random_mlp(rng, 5, 3, 2, 6), oracle::random_mlp(rng, 5, 3, 2, 6)};
  const Network joint = fuse_nt(members);
  CHECK(fuse_iterative(members).identical(joint));
  CHECK(fuse_recursive(members).identical(joint));
  FusionPlan plan;
  plan.sparsity = 0.5;
  CHECK(fuse(members, plan).identical(joint));
}

TEST_CASE("fusing copies of one net equals pruning it alone") {
  // Each unit ties with its own copies, so pruning keeps the top N/k units k times.
  RngStream rng(61, "dups");
  const Network m = oracle::random_mlp(rng, 5, 3, 2, 8);
  Tensor x = oracle::random_tensor({20, 5}, rng);
  for (std::size_t k : {2u, 4u, 8u}) {
    const std::vector<Network> copies(k, m);
    const Network fused = fuse_nt(copies);
    CHECK(fused.specs() == m.specs());
    const Network alone = magnitude_prune(m, KeepPolicy::with_sparsity(1.0 - 1.0 / k));
    CHECK(max_rel_diff(fused.predict(x), alone.predict(x)) <= 1e-5);
    CHECK(fuse_iterative(copies).specs() == m.specs());
    CHECK(fuse_recursive(copies).specs() == m.specs());
  }
}

TEST_CASE("recursive reduction splits left-heavy for odd k") {
  RngStream rng(62, "odd");
  std::vector<Network> members;
  for (int i = 0; i < 3; ++i) members.push_back(oracle::random_mlp(rng, 4, 2, 1, 5));
  const std::vector<Network> left{members[0], members[1]};
  const std::vector<Network> last{fuse_nt(left), members[2]};
  CHECK(fuse_recursive(members).identical(fuse_nt(last)));
  const std::vector<Network> step{fuse_nt(left), members[2]};
  CHECK(fuse_iterative(members).identical(fuse_nt(step)));
}

TEST_CASE("names round-trip") {
  for (auto m : {FusionMethod::NT, FusionMethod::NTIterative, FusionMethod::NTRecursive, FusionMethod::VanillaAvg,
                 FusionMethod::AlignAvg})
    CHECK(fusion_method_from_string(to_string(m)) == m);
  for (auto p : {Pipeline::PruneMergeFT, Pipeline::MergePruneFT, Pipeline::MergeFTPruneFT})
    CHECK(pipeline_from_string(to_string(p)) == p);
  CHECK_THROWS_AS(fusion_method_from_string("bogus"), Error);
  FusionPlan plan;
  CHECK(plan.effective_sparsity(4) == doctest::Approx(0.75));
}
