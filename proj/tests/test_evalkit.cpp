// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "crst/evalkit.hpp"
#include "doctest.h"

using namespace crst;

namespace {

// Intervals on a 0.1 s lattice so that a frame scan at lattice midpoints is exact.
std::vector<EventInterval> lattice_events(Rng& rng, std::size_t n, std::size_t n_classes) {
  std::vector<EventInterval> v;
  for (std::size_t i = 0; i < n; ++i) {
    const int a = int(rng.index(80));
    const int len = 1 + int(rng.index(20));
    v.push_back({int(rng.index(n_classes)), a * 0.1, (a + len) * 0.1});
  }
  return v;
}

// Max over all pairings (brute force) of matched count for one class.
std::size_t best_matching(const std::vector<EventInterval>& det,
                          const std::vector<EventInterval>& ref, std::size_t r,
                          std::vector<bool>& used) {
  if (r == ref.size()) return 0;
  std::size_t best = best_matching(det, ref, r + 1, used);
  for (std::size_t d = 0; d < det.size(); ++d) {
    if (!used[d] && det[d].class_id == ref[r].class_id && within_collar(det[d], ref[r])) {
      used[d] = true;
      best = std::max(best, 1 + best_matching(det, ref, r + 1, used));
      used[d] = false;
    }
  }
  return best;
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("collar semantics") {
  const EventInterval ref{0, 1.0, 3.0};
  const auto tp = match_events({{0, 1.15, 3.10}}, {ref}, 1);
  CHECK(tp.counts[0].tp == 1);
  CHECK(tp.counts[0].fp == 0);
  CHECK(tp.counts[0].fn == 0);
  const auto miss = match_events({{0, 1.30, 3.0}}, {ref}, 1);
  CHECK(miss.counts[0].tp == 0);
  CHECK(miss.counts[0].fp == 1);
  CHECK(miss.counts[0].fn == 1);
  // Strict bound.
  CHECK_FALSE(within_collar({0, 1.25, 3.0}, {0, 1.0, 3.0}));
  CHECK(within_collar({0, 0.81, 3.19}, {0, 1.0, 3.0}));
  // Class must match.
  CHECK(match_events({{1, 1.0, 3.0}}, {ref}, 2).counts[0].fn == 1);
  const auto none = match_events({}, {ref, {0, 5.0, 6.0}}, 1);
  CHECK(none.counts[0].fn == 2);
  CHECK(none.counts[0].tp + none.counts[0].fp == 0);
}

TEST_CASE("greedy matching equals brute force on disjoint references") {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    // References of one class spaced far apart; detections jittered around them.
    std::vector<EventInterval> ref, det;
    const std::size_t nr = 1 + rng.index(4);
    for (std::size_t i = 0; i < nr; ++i) ref.push_back({0, 2.0 * i, 2.0 * i + 1.0});
    const std::size_t nd = rng.index(6);
    for (std::size_t i = 0; i < nd; ++i) {
      const double base = 2.0 * rng.index(nr);
      det.push_back({0, base + rng.uniform(-0.3, 0.3), base + 1.0 + rng.uniform(-0.3, 0.3)});
    }
    const auto m = match_events(det, ref, 1);
    std::vector<bool> used(det.size(), false);
    CHECK(m.counts[0].tp == best_matching(det, ref, 0, used));
    CHECK(m.counts[0].tp + m.counts[0].fp == det.size());
    CHECK(m.counts[0].tp + m.counts[0].fn == ref.size());
  }
}

TEST_CASE("scores") {
  MatchResult m;
  m.counts = {{3, 1, 2}, {0, 0, 0}, {1, 1, 1}};
  const auto r = score(m);
  CHECK(r.classes[0].precision == doctest::Approx(0.75));
  CHECK(r.classes[0].recall == doctest::Approx(0.6));
  CHECK(r.classes[0].f == doctest::Approx(2.0 / 3.0));
  CHECK(r.classes[1].f == 0.0);
  CHECK(r.classes[2].f == doctest::Approx(0.5));
  CHECK(r.macro_f == doctest::Approx((2.0 / 3.0 + 0.0 + 0.5) / 3.0));
}

TEST_CASE("corpus matching covers clips on either side") {
  EventTable det{{"a", {{0, 0.0, 1.0}}}, {"b", {{1, 0.0, 1.0}}}};
  EventTable ref{{"a", {{0, 0.05, 1.05}}}, {"c", {{1, 2.0, 3.0}}}};
  const auto m = match_corpus(det, ref, 2);
  CHECK(m.counts[0].tp == 1);
  CHECK(m.counts[1].fp == 1);
  CHECK(m.counts[1].fn == 1);
}

TEST_CASE("confusion matrix") {
  const std::vector<EventInterval> ref{{0, 0.0, 1.0}, {1, 2.0, 3.0}, {2, 4.0, 5.0}};
  const auto perfect = confusion_matrix(ref, ref, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j <= 3; ++j) CHECK(perfect(i, j) == (i == j ? 1u : 0u));
  }
  const auto swapped = confusion_matrix({{2, 0.0, 1.0}}, {{0, 0.0, 1.0}}, 3);
  CHECK(swapped(0, 2) == 1);
  CHECK(swapped(0, 3) == 0);

  // Row sums equal reference counts; matched detections never exceed detections.
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const auto r = lattice_events(rng, 1 + rng.index(6), 3);
    auto d = r;
    for (auto& e : d) {
      if (rng.uniform() < 0.3) e.class_id = int(rng.index(3));
      if (rng.uniform() < 0.3) e.onset += 0.3;
    }
    d.resize(rng.index(d.size() + 1));
    const auto cm = confusion_matrix(d, r, 3);
    std::size_t matched = 0;
    for (int c = 0; c < 3; ++c) {
      std::size_t row = 0, refs = 0;
      for (std::size_t j = 0; j <= 3; ++j) row += cm(std::size_t(c), j);
      for (std::size_t j = 0; j < 3; ++j) matched += cm(std::size_t(c), j);
      for (const auto& e : r) refs += e.class_id == c;
      CHECK(row == refs);
    }
    CHECK(matched <= d.size());
    // Exhaustive oracle: the number of time-matched references equals the
    // maximum bipartite matching when every pair is eligible regardless of class.
    std::vector<EventInterval> r0 = r, d0 = d;
    for (auto& e : r0) e.class_id = 0;
    for (auto& e : d0) e.class_id = 0;
    std::vector<bool> used(d0.size(), false);
    const std::size_t best = best_matching(d0, r0, 0, used);
    CHECK(matched <= best);
  }
}

TEST_CASE("concurrency statistics against a frame scan") {
  EventTable single{{"x", {{0, 0.0, 1.0}}}};
  const auto s1 = concurrency_stats(single, 2);
  CHECK(s1.percent(0, 0) == 100.0);
  EventTable both{{"x", {{0, 0.0, 1.0}, {1, 0.0, 1.0}}}};
  const auto s2 = concurrency_stats(both, 2);
  CHECK(s2.percent(0, 1) == 100.0);
  CHECK(s2.percent(1, 1) == 100.0);
  CHECK(s2.percent(2, 1) == 100.0);

  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto clip = lattice_events(rng, 1 + rng.index(6), 4);
    for (const auto& e : clip) {
      std::size_t k = 0;
      const int lo = int(std::lround(e.onset * 10)), hi = int(std::lround(e.offset * 10));
      for (int f = lo; f < hi; ++f) {
        const double t = (f + 0.5) * 0.1;
        std::set<int> active;
        for (const auto& o : clip) {
          if (o.onset <= t && t < o.offset) active.insert(o.class_id);
        }
        k = std::max(k, active.size());
      }
      REQUIRE(max_concurrency(e, clip) == k);
    }
    const auto st = concurrency_stats(EventTable{{"c", clip}}, 4);
    for (std::size_t r = 0; r < 5; ++r) {
      const double sum = st.percent(r, 0) + st.percent(r, 1) + st.percent(r, 2);
      const std::size_t n = st.counts(r, 0) + st.counts(r, 1) + st.counts(r, 2);
      if (n > 0) CHECK(std::abs(sum - 100.0) < 1e-9);
    }
  }
}

TEST_CASE("welch test and incomplete beta") {
  for (double a : {0.5, 1.0, 2.5, 7.0}) {
    for (double b : {0.5, 1.5, 4.0}) {
      for (double x : {0.01, 0.2, 0.5, 0.77, 0.99}) {
        CHECK(std::abs(incomplete_beta(a, b, x) - boost::math::ibeta(a, b, x)) < 1e-12);
      }
    }
  }
  const std::vector<double> a{0.31, 0.35, 0.29, 0.33, 0.36};
  const std::vector<double> b{0.28, 0.27, 0.30, 0.26, 0.29};
  const auto w = welch_t(a, b);
  // Independent evaluation of the same statistic.
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = std::pow(stddev_of(a), 2) / 5, vb = std::pow(stddev_of(b), 2) / 5;
  const double t = (ma - mb) / std::sqrt(va + vb);
  const double df = (va + vb) * (va + vb) / (va * va / 4 + vb * vb / 4);
  CHECK(w.t == doctest::Approx(t).epsilon(1e-12));
  CHECK(w.df == doctest::Approx(df).epsilon(1e-12));
  CHECK(std::abs(w.p - boost::math::ibeta(df / 2, 0.5, df / (df + t * t))) < 1e-12);
  CHECK(welch_t(b, a).p == doctest::Approx(w.p).epsilon(1e-14));
  CHECK(welch_t(a, a).p == doctest::Approx(1.0));

  std::vector<double> z(5, 0.0), o{1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 2e-9, 1.0};
  CHECK(welch_t(z, o).p < 1e-6);
  const auto deg = welch_t(z, std::vector<double>(5, 1.0));
  CHECK(deg.degenerate);
  CHECK(deg.p == 0.0);
  CHECK(welch_t(z, z).p == 1.0);
  CHECK_THROWS_AS(welch_t({1.0}, {1.0, 2.0}), InvalidInput);
  CHECK(stddev_of({1.0, 2.0, 3.0}) == doctest::Approx(1.0));
}

TEST_CASE("csv round trips and errors") {
  EventTable t{{"clip_1", {{0, 0.5, 1.25}, {2, 0.1, 0.2}}}, {"clip_0", {}}};
  write_intervals_csv(t, tmp("crst_iv.csv"));
  const auto back = read_intervals_csv(tmp("crst_iv.csv"));
  REQUIRE(back.count("clip_1") == 1);
  CHECK(back.at("clip_1").size() == 2);
  CHECK(back.at("clip_1") == t.at("clip_1"));

  {
    std::ofstream f(tmp("crst_bad.csv"));
    f << "clip_id,class,onset,offset\nx,0,1.0\n";
  }
  try {
    read_intervals_csv(tmp("crst_bad.csv"));
    CHECK(false);
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  {
    std::ofstream f(tmp("crst_bad.csv"));
    f << "clip_id,class,onset,offset\nx,0,2.0,1.0\n";
  }
  CHECK_THROWS_AS(read_intervals_csv(tmp("crst_bad.csv")), FormatError);

  MatchResult m;
  m.counts = {{3, 1, 2}, {1, 0, 0}};
  const auto r = score(m);
  write_score_csv(r, tmp("crst_score.csv"));
  const auto rb = read_score_csv(tmp("crst_score.csv"));
  CHECK(rb.macro_f == doctest::Approx(r.macro_f).epsilon(1e-15));
  CHECK(rb.classes.size() == 2);

  RunComparison cmp{{"crst", "supervised-sw"}, {{0.40, 0.42, 0.41}, {0.30, 0.31, 0.33}}};
  write_comparison_csv(cmp, "crst", tmp("crst_cmp.csv"));
  std::ifstream f(tmp("crst_cmp.csv"));
  std::string header, l1, l2;
  std::getline(f, header);
  std::getline(f, l1);
  std::getline(f, l2);
  CHECK(l1.find("41.00 ± 1.00") != std::string::npos);
  CHECK(l2.rfind("supervised-sw", 0) == 0);
  CHECK(l2.back() != ',');
}
