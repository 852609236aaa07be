// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "crst/model.hpp"
#include "doctest.h"

using namespace crst;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_mel_in = 8;
  c.conv_blocks = {{3, 2, 2}, {4, 1, 4}};
  c.recurrent_hidden = 4;
  c.recurrent_layers = 1;
  c.n_classes = 3;
  c.dropout_rate = 0.3;
  return c;
}

FeatureGrid random_input(std::size_t frames, std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  FeatureGrid x{RealMatrix(frames, channels), 10.0};
  for (double& v : x.data.values()) v = rng.normal();
  return x;
}

// Parameters with non-trivial buffers and affine terms so every path matters.
ModelParams perturbed_params(const Model& m, std::uint64_t seed) {
  ModelParams p = m.init_params(seed);
  Rng rng(seed + 100);
  for (const auto& e : m.layout().entries()) {
    for (std::size_t i = 0; i < e.size(); ++i) {
      double& v = p[e.offset + i];
      if (e.name.find("running_var") != std::string::npos) {
        v = rng.uniform(0.5, 2.0);
      } else {
        v += rng.uniform(-0.2, 0.2);
      }
    }
  }
  return p;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

TEST_CASE("parameter count matches the closed form and layout tiles the vector") {
  for (const ModelConfig& cfg : {tiny_config(), ModelConfig{}}) {
    const Model m(cfg);
    CHECK(m.param_count() == expected_param_count(cfg));
    std::size_t next = 0;
    for (const auto& e : m.layout().entries()) {
      CHECK(e.offset == next);
      next += e.size();
    }
    CHECK(next == m.param_count());
  }
  ModelConfig two = tiny_config();
  two.recurrent_layers = 2;
  CHECK(Model(two).param_count() == expected_param_count(two));
  // Tiny model stays below the 5k budget of the gradient suite.
  CHECK(Model(tiny_config()).param_count() < 5000);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.conv_blocks = {{3, 1, 2}};  // 8 -> 4 frequency bins, not 1
  CHECK_THROWS_AS(c.validate(), InvalidInput);
  c = tiny_config();
  c.conv_blocks.clear();
  CHECK_THROWS_AS(c.validate(), InvalidInput);
  c = tiny_config();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), InvalidInput);
  CHECK(tiny_config().time_pool() == 2);
  CHECK(ModelConfig::from_json(tiny_config().to_json()) == tiny_config());
}

TEST_CASE("init is deterministic with zero biases") {
  const Model m(tiny_config());
  const auto a = m.init_params(3);
  CHECK(a == m.init_params(3));
  CHECK(a != m.init_params(4));
  for (const auto& e : m.layout().entries()) {
    const bool bias = e.name.find("bias") != std::string::npos ||
                      e.name.find("b_input") != std::string::npos ||
                      e.name.find("b_hidden") != std::string::npos ||
                      e.name.find(".shift") != std::string::npos ||
                      e.name.find("running_mean") != std::string::npos;
    if (bias) {
      for (std::size_t i = 0; i < e.size(); ++i) CHECK(a[e.offset + i] == 0.0);
    }
  }
}

TEST_CASE("glu matches a scalar loop") {
  Rng rng(9);
  const std::size_t ch = 3, pos = 7;
  std::vector<double> c(ch * pos), w(ch * ch), b(ch);
  for (double& v : c) v = rng.normal(0.0, 2.0);
  for (double& v : w) v = rng.normal();
  for (double& v : b) v = rng.normal();
  const auto out = glu(c, ch, w, b);
  for (std::size_t k = 0; k < ch; ++k) {
    for (std::size_t p = 0; p < pos; ++p) {
      double lin = b[k];
      for (std::size_t j = 0; j < ch; ++j) lin += w[k * ch + j] * c[j * pos + p];
      const double ref = lin / (1.0 + std::exp(-c[k * pos + p]));
      CHECK(std::abs(out[k * pos + p] - ref) < 1e-12);
    }
  }
  const std::vector<double> zeros(ch * pos, 0.0);
  const auto z = glu(zeros, ch, w, b);
  for (std::size_t k = 0; k < ch; ++k) {
    for (std::size_t p = 0; p < pos; ++p) CHECK(z[k * pos + p] == doctest::Approx(0.5 * b[k]));
  }
  const std::vector<double> neg(ch * pos, -60.0);
  for (double v : glu(neg, ch, std::vector<double>(ch * ch, 0.0), std::vector<double>(ch, 1.0))) {
    CHECK(std::abs(v) < 1e-20);
  }
}

TEST_CASE("forward shape, range and determinism") {
  ModelConfig cfg = tiny_config();
  cfg.conv_blocks = {{3, 2, 2}, {4, 2, 4}};
  const Model m(cfg);
  const auto p = m.init_params(1);
  const auto x = random_input(400, 8, 2);
  const auto y = m.forward(p, x);
  CHECK(y.rows() == 100);
  CHECK(y.cols() == 3);
  CHECK(m.output_frames(400) == 100);
  for (double v : y.values()) CHECK((v > 0.0 && v < 1.0));
  CHECK(m.forward(p, x) == y);
  CHECK_THROWS_AS(m.forward(p, random_input(10, 7, 1)), InvalidInput);

  // Extreme inputs still stay strictly inside (0,1).
  FeatureGrid big{RealMatrix(8, 8, 1e6), 10.0};
  const auto yb = m.forward(p, big);
  for (double v : yb.values()) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("backward matches central finite differences on every layer") {
  for (std::size_t layers : {1u, 2u}) {
    ModelConfig cfg = tiny_config();
    cfg.recurrent_layers = layers;
    const Model m(cfg);
    const auto p0 = perturbed_params(m, 5 + layers);
    const auto x = random_input(12, 8, 6);
    ForwardCache cache;
    const auto y = m.forward_train(p0, x, 99, cache);
    Rng rng(7);
    RealMatrix g(y.rows(), y.cols());
    for (double& v : g.values()) v = rng.normal();
    const auto grad = m.backward(p0, cache, g);

    auto objective = [&](const ModelParams& p) {
      ForwardCache c;
      const auto out = m.forward_train(p, x, 99, c);
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out.values()[i] * g.values()[i];
      return s;
    };

    const double h = 1e-4;
    std::size_t checked = 0;
    for (const auto& e : m.layout().entries()) {
      const std::size_t n = std::min<std::size_t>(e.size(), 12);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = e.offset + (k * 7919) % e.size();
        if (!e.trainable) {
          CHECK(grad[i] == 0.0);
          continue;
        }
        ModelParams pp = p0, pm = p0;
        pp[i] += h;
        pm[i] -= h;
        const double fd = (objective(pp) - objective(pm)) / (2.0 * h);
        INFO(e.name << "[" << i - e.offset << "] analytic " << grad[i] << " fd " << fd);
        CHECK(rel_err(grad[i], fd) < 1e-5);
        ++checked;
      }
    }
    CHECK(checked >= 100);
  }
}

TEST_CASE("backward edge cases") {
  const Model m(tiny_config());
  const auto p = m.init_params(2);
  const auto x = random_input(10, 8, 3);
  ForwardCache cache;
  const auto y = m.forward_train(p, x, 4, cache);
  const auto zero = m.backward(p, cache, RealMatrix(y.rows(), y.cols(), 0.0));
  CHECK(std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }));
  RealMatrix g(y.rows(), y.cols(), 0.3);
  CHECK(m.backward(p, cache, g) == m.backward(p, cache, g));
  CHECK_THROWS_AS(m.backward(p, cache, RealMatrix(y.rows() + 1, y.cols())), InvalidInput);

  // Same dropout seed gives the same train forward; eval ignores dropout.
  ForwardCache c2;
  CHECK(m.forward_train(p, x, 4, c2) == y);
}

TEST_CASE("running statistics move towards the batch") {
  ModelConfig cfg = tiny_config();
  cfg.norm_momentum = 0.1;
  const Model m(cfg);
  auto p = m.init_params(1);
  const auto before = p;
  const auto x = random_input(12, 8, 2);
  ForwardCache cache;
  m.forward_train(p, x, 1, cache);
  const ForwardCache* caches[] = {&cache};
  m.update_running_stats(p, caches);
  const auto& e = m.layout().at("norm0.running_mean");
  bool moved = false;
  for (std::size_t i = 0; i < e.size(); ++i) moved = moved || p[e.offset + i] != before[e.offset + i];
  CHECK(moved);
  // Trainable entries are untouched.
  const auto& w = m.layout().at("conv0.weight");
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(p[w.offset + i] == before[w.offset + i]);
}

TEST_CASE("clip_pool is the column mean and its gradient is uniform") {
  RealMatrix c(5, 2, 0.3);
  CHECK(clip_pool(c) == std::vector<double>{0.3, 0.3});
  RealMatrix one(1, 3);
  one(0, 0) = 0.1;
  one(0, 1) = 0.2;
  one(0, 2) = 0.7;
  CHECK(clip_pool(one) == std::vector<double>{0.1, 0.2, 0.7});
  Rng rng(4);
  RealMatrix r(9, 4);
  for (double& v : r.values()) v = rng.uniform();
  const auto pooled = clip_pool(r);
  for (std::size_t k = 0; k < 4; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t < 9; ++t) s += r(t, k);
    CHECK(pooled[k] == doctest::Approx(s / 9.0).epsilon(1e-14));
  }
  const std::vector<double> gk{1.0, -2.0, 0.5, 0.0};
  const RealMatrix gb = clip_pool_backward(gk, 9);
  for (std::size_t t = 0; t < 9; ++t) {
    for (std::size_t k = 0; k < 4; ++k) CHECK(gb(t, k) == doctest::Approx(gk[k] / 9.0));
  }
}

TEST_CASE("ema update") {
  const ModelParams t{1.0, 2.0, -3.0}, s{0.0, 4.0, 3.0};
  CHECK(ema_update(t, s, 0.0) == s);
  CHECK(ema_update(s, s, 0.9) == s);
  const auto u = ema_update(t, s, 0.75);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(u[i] == doctest::Approx(0.75 * t[i] + 0.25 * s[i]));
    CHECK(u[i] >= std::min(t[i], s[i]));
    CHECK(u[i] <= std::max(t[i], s[i]));
  }
  CHECK_THROWS_AS(ema_update(t, ModelParams{1.0}, 0.5), InvalidInput);
  // Geometric convergence to a fixed student.
  ModelParams cur = t;
  for (int i = 0; i < 200; ++i) cur = ema_update(cur, s, 0.9);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(cur[i] - s[i]) < 1e-8);
}

TEST_CASE("adam") {
  ModelParams p{0.5, -1.0};
  OptState opt = make_opt_state(2);
  CHECK(opt.lr_cap == 0.001);
  adam_step(p, std::vector<double>{0.0, 0.0}, opt, 0.001);
  CHECK(p == ModelParams{0.5, -1.0});
  CHECK_THROWS_AS(adam_step(p, std::vector<double>{NAN, 0.0}, opt, 0.001), NumericError);

  // The first bias-corrected step moves each coordinate by lr against its gradient sign.
  ModelParams q{0.0, 0.0};
  OptState o2 = make_opt_state(2);
  adam_step(q, std::vector<double>{3.0, -0.2}, o2, 0.001);
  CHECK(q[0] == doctest::Approx(-0.001).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(0.001).epsilon(1e-6));

  // lr above the cap is clipped to it.
  ModelParams r{0.0};
  OptState o3 = make_opt_state(1);
  adam_step(r, std::vector<double>{1.0}, o3, 0.5);
  CHECK(r[0] == doctest::Approx(-0.001).epsilon(1e-6));

  // Scalar convergence run on f(w) = w^2 from w0 = 1. With the step capped at
  // 0.001 two hundred steps cannot travel distance 1, so the cap is raised.
  ModelParams w{1.0};
  OptState o4 = make_opt_state(1, 0.05);
  for (int i = 0; i < 200; ++i) adam_step(w, std::vector<double>{2.0 * w[0]}, o4, 0.05);
  CHECK(std::abs(w[0]) < 1e-2);

  // Non-trainable coordinates stay put.
  ModelParams m{1.0, 1.0};
  OptState o5 = make_opt_state(2);
  const std::vector<std::uint8_t> mask{1, 0};
  adam_step(m, std::vector<double>{1.0, 1.0}, o5, 0.001, &mask);
  CHECK(m[1] == 1.0);
  CHECK(m[0] < 1.0);
}
