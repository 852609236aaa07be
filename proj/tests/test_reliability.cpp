// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "crst/reliability.hpp"
#include "doctest.h"

using namespace crst;

namespace {

double xlog2(double a, double b) { return a > 0.0 ? a * std::log2(a / b) : 0.0; }

// Scalar reference: Bernoulli JSD per component, base 2.
double jsd_ref(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    const double kp = xlog2(p[i], m) + xlog2(1 - p[i], 1 - m);
    const double kq = xlog2(q[i], m) + xlog2(1 - q[i], 1 - m);
    s += 0.5 * kp + 0.5 * kq;
  }
  return s / double(p.size());
}

}  // namespace

TEST_CASE("ramp weight") {
  const RampSchedule s{100, 3.0};
  CHECK(ramp_weight(100, s) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(ramp_weight(0, s) == doctest::Approx(0.020214).epsilon(1e-4));
  CHECK(ramp_weight(50, s) == doctest::Approx(0.85951).epsilon(1e-5));
  CHECK(ramp_weight(500, s) == ramp_weight(100, s));
  double prev = -1.0;
  for (std::size_t t = 0; t <= 100; ++t) {
    const double w = ramp_weight(t, s);
    CHECK(w >= prev);
    prev = w;
  }
  CHECK_THROWS_AS(RampSchedule({0, 3.0}).validate(), InvalidInput);
}

TEST_CASE("jsd basics and scalar oracle") {
  CHECK(jsd(std::vector<double>{0.3, 0.8}, std::vector<double>{0.3, 0.8}) == 0.0);
  CHECK(jsd(std::vector<double>{1.0}, std::vector<double>{0.0}) == doctest::Approx(1.0));
  CHECK(jsd(std::vector<double>{0.5}, std::vector<double>{0.5}) == 0.0);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(7), q(7);
    for (double& v : p) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    for (double& v : q) v = rng.uniform() < 0.1 ? 1.0 : rng.uniform();
    const double a = jsd(p, q);
    CHECK(std::abs(a - jsd_ref(p, q)) < 1e-12);
    CHECK(std::abs(a - jsd(q, p)) < 1e-15);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("strong reliability") {
  StrongLabelGrid y{BinaryMatrix(4, 2, 0)};
  y.data(1, 0) = 1;
  y.data(2, 1) = 1;
  PseudoLabelGrid same(4, 2), opposite(4, 2);
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    same.values()[i] = y.data.values()[i];
    opposite.values()[i] = 1.0 - y.data.values()[i];
  }
  const std::vector<StrongLabelGrid> ys{y};
  CHECK(reliability_strong(std::vector<PseudoLabelGrid>{same}, ys, 2.5) == doctest::Approx(2.5));
  CHECK(reliability_strong(std::vector<PseudoLabelGrid>{opposite}, ys, 2.5) ==
        doctest::Approx(0.0));
  CHECK(reliability_strong({}, {}, 2.5) == 0.0);

  Rng rng(4);
  std::vector<PseudoLabelGrid> ps;
  std::vector<StrongLabelGrid> ts;
  double ref = 0.0;
  for (int n = 0; n < 3; ++n) {
    PseudoLabelGrid p(5, 3);
    StrongLabelGrid t{BinaryMatrix(5, 3, 0)};
    for (double& v : p.values()) v = rng.uniform();
    for (auto& v : t.data.values()) v = rng.uniform() < 0.3;
    std::vector<double> tv(t.data.values().begin(), t.data.values().end());
    ref += 1.0 - jsd_ref(p.values(), tv);
    ps.push_back(p);
    ts.push_back(t);
  }
  const double g = reliability_strong(ps, ts, 3.0);
  CHECK(std::abs(g - 3.0 * ref / 3.0) < 1e-12);
  CHECK(g >= 0.0);
  CHECK(g <= 3.0);
  CHECK_THROWS_AS(reliability_strong(ps, std::vector<StrongLabelGrid>{y}, 3.0), InvalidInput);
}

TEST_CASE("weak reliability") {
  const WeakLabel w{{1, 0, 1}};
  const std::vector<WeakLabel> ws{w};
  CHECK(reliability_weak(std::vector<std::vector<double>>{{1.0, 0.0, 1.0}}, ws, 1.7) ==
        doctest::Approx(1.7));
  CHECK(reliability_weak(std::vector<std::vector<double>>{{0.2, 0.3, 0.9}}, ws, 0.0) == 0.0);
  const std::vector<double> p{0.6, 0.1, 0.4};
  const double expect = 2.0 * (1.0 - jsd_ref(p, {1.0, 0.0, 1.0}));
  CHECK(std::abs(reliability_weak(std::vector<std::vector<double>>{p}, ws, 2.0) - expect) < 1e-12);
  CHECK(reliability_weak({}, {}, 2.0) == 0.0);
}
