#include <doctest.h>

#include <cmath>
#include <set>

#include "nt/tensor.hpp"
#include "oracles.hpp"

using namespace nt;

namespace {

void check_close(const Tensor& got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(std::abs(got[i] - want[i]) <= tol * (1.0 + std::abs(want[i])));
  }
}

std::vector<double> transpose(const std::vector<double>& a, std::size_t r, std::size_t c) {
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

}  // namespace

TEST_CASE("matmul variants agree with the naive oracle") {
  RngStream rng(11, "matmul");
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(7), k = 1 + rng.below(9), n = 1 + rng.below(6);
    Tensor a = oracle::random_tensor({m, k}, rng);
    Tensor b = oracle::random_tensor({k, n}, rng);
    const auto da = oracle::to_double(a), db = oracle::to_double(b);
    const auto want = oracle::naive_matmul(da, db, m, k, n);
    check_close(matmul(a, b), want, 1e-5);

    Tensor bt({n, k});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) bt.at(j, i) = b.at(i, j);
    check_close(matmul_nt(a, bt), want, 1e-5);

    Tensor at({k, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) at.at(j, i) = a.at(i, j);
    check_close(matmul_tn(at, b), want, 1e-5);
    (void)transpose;
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({4, 2})), Error);
  CHECK_THROWS_AS(matmul_nt(Tensor({2, 3}), Tensor({4, 2})), Error);
  CHECK_THROWS_AS(matmul_tn(Tensor({2, 3}), Tensor({4, 2})), Error);
}

TEST_CASE("conv2d matches the naive oracle across strides and padding") {
  RngStream rng(12, "conv");
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      Tensor x = oracle::random_tensor({2, 3, 7, 6}, rng);
      Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
      const auto want = oracle::naive_conv({x.shape(), oracle::to_double(x)}, oracle::to_double(w), {}, 4, 3, 3,
                                           stride, pad);
      const Tensor got = conv2d(x, w, stride, pad);
      CHECK(got.shape() == want.shape);
      check_close(got, want.v, 1e-5);
    }
}

TEST_CASE("row norms flatten trailing axes and optionally include the bias") {
  Tensor w({2, 1, 2, 2}, {1, 1, 1, 1, 0, 0, 3, 4});
  Tensor b({2}, {0, 12});
  Tensor n = row_l2_norms(w);
  CHECK(n[0] == doctest::Approx(2.0));
  CHECK(n[1] == doctest::Approx(5.0));
  Tensor nb = row_l2_norms(w, &b, true);
  CHECK(nb[1] == doctest::Approx(13.0));
  Tensor nx = row_l2_norms(w, &b, false);
  CHECK(nx[1] == doctest::Approx(5.0));
}

TEST_CASE("take gathers in the requested order on any axis") {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  const std::vector<std::size_t> cols{2, 0};
  Tensor c = take(t, 1, cols);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0, 0) == 2);
  CHECK(c.at(0, 1) == 0);
  CHECK(c.at(1, 0) == 5);
  const std::vector<std::size_t> rows{1};
  CHECK(take(t, 0, rows).at(0, 2) == 5);
  const std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(take(t, 1, bad), Error);
}

TEST_CASE("tensor construction validates element counts") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), Error);
  Tensor t({2, 2}, 1.5f);
  CHECK(t.all_finite());
  t[1] = NAN;
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(check_finite(t, "test"), Error);
  CHECK_THROWS_AS(Tensor({4}).reshaped({3}), Error);
  CHECK(Tensor({4}).reshaped({2, 2}).shape() == Shape{2, 2});
}

TEST_CASE("rng streams are pure functions of seed, stream and position") {
  RngStream a(5, "x"), b(5, "x"), c(5, "y"), d(6, "x");
  std::vector<std::uint64_t> va, vb;
  for (int i = 0; i < 10; ++i) {
    va.push_back(a.next_u64());
    vb.push_back(b.next_u64());
  }
  CHECK(va == vb);
  CHECK(c.next_u64() != va[0]);
  CHECK(d.next_u64() != va[0]);

  RngStream u(1, "uniform");
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = u.uniform();
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
    sum += x;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));

  RngStream g(2, "normal");
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = g.normal();
    s1 += x;
    s2 += x * x;
  }
  CHECK(std::abs(s1 / 20000) < 0.03);
  CHECK(s2 / 20000 == doctest::Approx(1.0).epsilon(0.05));

  RngStream k(3, "below");
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 500; ++i) {
    const auto v = k.below(7);
    REQUIRE(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("memory accounting tracks tensor buffers") {
  const auto before = memory::live_bytes();
  {
    Tensor t({1000});
    CHECK(memory::live_bytes() == before + 4000);
    memory::reset_peak();
    Tensor u({500});
    CHECK(memory::peak_bytes() >= before + 6000);
  }
  CHECK(memory::live_bytes() == before);
}
