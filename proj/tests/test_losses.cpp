#include <doctest.h>

#include <cmath>

#include "nt/losses.hpp"
#include "oracles.hpp"

using namespace nt;

TEST_CASE("softmax rows sum to one and respect temperature") {
  Tensor z({2, 3}, {1, 2, 3, -1, 0, 5});
  for (float t : {1.0f, 2.0f}) {
    Tensor p = softmax(z, t);
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0;
      for (float v : p.row(r)) s += v;
      CHECK(s == doctest::Approx(1.0));
    }
  }
  CHECK(softmax(z, 2.0f).at(0, 2) < softmax(z, 1.0f).at(0, 2));
}

TEST_CASE("cross entropy matches the double-precision oracle") {
  RngStream rng(3, "ce");
  Tensor z = oracle::random_tensor({6, 4}, rng, 3.0);
  std::vector<int> y{0, 3, 2, 1, 1, 0};
  CHECK(cross_entropy(z, y) == doctest::Approx(oracle::ref_cross_entropy(oracle::to_double(z), y, 4)).epsilon(1e-6));
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{0, 1}), Error);
}

TEST_CASE("kd loss reduces to cross entropy bit-exactly without the soft term") {
  RngStream rng(4, "kd0");
  Tensor s = oracle::random_tensor({5, 3}, rng);
  Tensor t = oracle::random_tensor({5, 3}, rng);
  std::vector<int> y{0, 1, 2, 2, 1};
  KdConfig kd{2.0f, 0.0f};
  CHECK(kd_loss(s, t, y, kd) == cross_entropy(s, y));
  const auto a = kd_loss_with_grad(s, t, y, kd);
  const auto b = cross_entropy_with_grad(s, y);
  CHECK(a.loss == b.loss);
  CHECK(a.grad.identical(b.grad));
}

TEST_CASE("identical teacher and student give zero soft loss") {
  RngStream rng(5, "kd1");
  Tensor s = oracle::random_tensor({5, 3}, rng);
  std::vector<int> y{0, 1, 2, 2, 1};
  const auto r = kd_loss_with_grad(s, s, y, KdConfig{2.0f, 1.0f});
  CHECK(std::abs(r.loss) < 1e-6);
  for (float g : r.grad.values()) CHECK(std::abs(g) < 1e-6);
}

TEST_CASE("kd loss and logit gradient match the oracle at T=2") {
  RngStream rng(6, "kd2");
  for (float soft : {1.0f, 0.5f}) {
    Tensor s = oracle::random_tensor({4, 5}, rng, 2.0);
    Tensor t = oracle::random_tensor({4, 5}, rng, 2.0);
    std::vector<int> y{4, 0, 2, 3};
    const KdConfig kd{2.0f, soft};
    const auto r = kd_loss_with_grad(s, t, y, kd);
    const auto ds = oracle::to_double(s), dt = oracle::to_double(t);
    CHECK(r.loss == doctest::Approx(oracle::ref_kd(ds, dt, y, 5, 2.0, soft)).epsilon(1e-5));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto up = ds, dn = ds;
      up[i] += 1e-3;
      dn[i] -= 1e-3;
      const double num = (oracle::ref_kd(up, dt, y, 5, 2.0, soft) - oracle::ref_kd(dn, dt, y, 5, 2.0, soft)) / 2e-3;
      CHECK(oracle::rel_error(r.grad[i], num, 1e-4) <= 1e-3);
    }
  }
}

TEST_CASE("kd config validation") {
  CHECK_THROWS_AS((KdConfig{0.0f, 1.0f}.validate()), Error);
  CHECK_THROWS_AS((KdConfig{2.0f, 1.5f}.validate()), Error);
  CHECK_NOTHROW((KdConfig{2.0f, 0.3f}.validate()));
}
