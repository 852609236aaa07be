// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "crst/pseudolabel.hpp"
#include "doctest.h"

using namespace crst;

namespace {

std::vector<double> random_post(Rng& rng, std::size_t C) {
  std::vector<double> p(C);
  for (double& v : p) {
    // Mix of confident and uncertain classes, including values at the clamp.
    const double u = rng.uniform();
    v = u < 0.05 ? 0.0 : (u > 0.95 ? 1.0 : rng.uniform());
  }
  return p;
}

}  // namespace

TEST_CASE("label_count") {
  CHECK(label_count(10, 2) == 56);
  CHECK(label_count(3, 0) == 1);
  CHECK(label_count(5, 5) == 32);
  CHECK(label_count(12, 2) == 1 + 12 + 66);
  CHECK_THROWS_AS(label_count(2, 3), InvalidInput);
}

TEST_CASE("enumeration worked examples") {
  LabelEnumeration e;
  const auto y = enumerate_pseudo_label(std::vector<double>{0.9, 0.2}, 2, &e);
  CHECK(y[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(e.labels.size() == 4);

  const auto h = enumerate_pseudo_label(std::vector<double>{0.5, 0.5, 0.5}, 2, &e);
  for (double v : h) CHECK(v == doctest::Approx(3.0 / 7.0).epsilon(1e-12));
  CHECK(e.labels.size() == 7);
  CHECK(std::accumulate(e.probs.begin(), e.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));

  const auto z = enumerate_pseudo_label(std::vector<double>{1e-9, 1e-9, 1e-9, 1e-9}, 2);
  for (double v : z) CHECK(v < 1e-6);

  CHECK_THROWS_AS(enumerate_pseudo_label(std::vector<double>(21, 0.5), 2), SizeError);
}

TEST_CASE("DP equals enumeration for K=2 on random vectors") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t C = 2 + rng.index(11);
    const auto p = random_post(rng, C);
    const auto a = dp_pseudo_label(p);
    const auto b = enumerate_pseudo_label(p, 2);
    REQUIRE(a.size() == C);
    for (std::size_t i = 0; i < C; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("marginal identity when K = C") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t C = 1 + rng.index(8);
    std::vector<double> p(C);
    for (double& v : p) v = rng.uniform(0.01, 0.99);
    const auto y = enumerate_pseudo_label(p, C);
    for (std::size_t i = 0; i < C; ++i) CHECK(y[i] == doctest::Approx(p[i]).epsilon(1e-12));
  }
}

TEST_CASE("truncation bound, range, symmetry and equivariance") {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t C = 3 + rng.index(6);
    std::vector<double> p(C);
    for (double& v : p) v = rng.uniform(0.01, 0.99);
    LabelEnumeration e;
    const auto y = enumerate_pseudo_label(p, 2, &e);
    // Retained mass: the unnormalised likelihoods of at-most-2 labels sum to N.
    for (std::size_t i = 0; i < C; ++i) {
      CHECK(y[i] >= 0.0);
      CHECK(y[i] <= 1.0);
      CHECK(y[i] <= p[i] / e.normalizer + 1e-12);
    }
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<double> q(C);
    for (std::size_t i = 0; i < C; ++i) q[i] = p[perm[i]];
    const auto yq = dp_pseudo_label(q);
    const auto yp = dp_pseudo_label(p);
    for (std::size_t i = 0; i < C; ++i) CHECK(yq[i] == doctest::Approx(yp[perm[i]]).epsilon(1e-12));
  }
  const auto s = dp_pseudo_label(std::vector<double>{0.37, 0.37});
  CHECK(s[0] == s[1]);
}

TEST_CASE("pseudo_label_grid is frame-wise DP") {
  Rng rng(11);
  PosteriorGrid g(1000, 6);
  for (double& v : g.values()) v = rng.uniform();
  const auto y = pseudo_label_grid(g);
  REQUIRE(y.same_shape(g));
  for (std::size_t t = 0; t < g.rows(); ++t) {
    const auto ref = enumerate_pseudo_label(g.row(t), 2);
    for (std::size_t c = 0; c < g.cols(); ++c) REQUIRE(std::abs(y(t, c) - ref[c]) < 1e-9);
  }

  PosteriorGrid cst(20, 4);
  for (std::size_t t = 0; t < 20; ++t) {
    for (std::size_t c = 0; c < 4; ++c) cst(t, c) = 0.1 + 0.2 * double(c);
  }
  const auto yc = pseudo_label_grid(cst);
  for (std::size_t t = 1; t < 20; ++t) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(yc(t, c) == yc(0, c));
  }

  PosteriorGrid big(100, 10);
  for (double& v : big.values()) v = rng.uniform();
  const auto t0 = std::chrono::steady_clock::now();
  (void)pseudo_label_grid(big);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  CHECK(ms < 50.0);
}
