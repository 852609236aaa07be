// SPDX-License-Identifier: Apache-2.0

#include "crst/pseudolabel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace crst {

namespace {

double clamp_post(double p) { return std::clamp(p, kPosteriorClamp, 1.0 - kPosteriorClamp); }

// Streaming log-sum-exp.
class LogSum {
 public:
  void add(double x) {
    if (x == -std::numeric_limits<double>::infinity()) {
      return;
    }
    if (x <= max_) {
      sum_ += std::exp(x - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - x) + 1.0;
      max_ = x;
    }
  }
  double value() const {
    return sum_ > 0.0 ? max_ + std::log(sum_) : -std::numeric_limits<double>::infinity();
  }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0.0;
};

}  // namespace

std::uint64_t label_count(std::size_t C, std::size_t K) {
  if (K > C) {
    throw InvalidInput("label_count: K exceeds the class count");
  }
  std::uint64_t total = 0;
  std::uint64_t binom = 1;  // C choose k
  for (std::size_t k = 0; k <= K; ++k) {
    total += binom;
    binom = binom * (C - k) / (k + 1);
  }
  return total;
}

std::vector<double> enumerate_pseudo_label(std::span<const double> post, std::size_t K,
                                           LabelEnumeration* detail) {
  const std::size_t C = post.size();
  if (C > 20) {
    throw SizeError("enumerate_pseudo_label: more than 20 classes, use the K=2 recursion");
  }
  if (K > C) {
    throw InvalidInput("enumerate_pseudo_label: K exceeds the class count");
  }
  std::vector<double> lp(C);
  std::vector<double> lq(C);
  for (std::size_t i = 0; i < C; ++i) {
    const double p = clamp_post(post[i]);
    lp[i] = std::log(p);
    lq[i] = std::log1p(-p);
  }
  std::vector<std::uint32_t> masks;
  std::vector<double> logw;
  LogSum total;
  for (std::uint32_t m = 0; m < (1u << C); ++m) {
    if (static_cast<std::size_t>(std::popcount(m)) > K) {
      continue;
    }
    double lw = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      lw += (m >> i) & 1u ? lp[i] : lq[i];
    }
    masks.push_back(m);
    logw.push_back(lw);
    total.add(lw);
  }
  const double logn = total.value();
  std::vector<double> out(C, 0.0);
  if (detail != nullptr) {
    *detail = LabelEnumeration{K, C, {}, {}, std::exp(logn)};
  }
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const double p = std::exp(logw[n] - logn);
    for (std::size_t i = 0; i < C; ++i) {
      if ((masks[n] >> i) & 1u) {
        out[i] += p;
      }
    }
    if (detail != nullptr) {
      std::vector<std::uint8_t> l(C);
      for (std::size_t i = 0; i < C; ++i) {
        l[i] = static_cast<std::uint8_t>((masks[n] >> i) & 1u);
      }
      detail->labels.push_back(std::move(l));
      detail->probs.push_back(p);
    }
  }
  return out;
}

std::vector<double> dp_pseudo_label(std::span<const double> post) {
  const std::size_t C = post.size();
  std::vector<double> l(C);
  double p0 = 0.0;
  for (std::size_t i = 0; i < C; ++i) {
    const double p = clamp_post(post[i]);
    p0 += std::log1p(-p);
    l[i] = std::log(p) - std::log1p(-p);
  }
  // P1_i = P0 + l_i ; P2_ij = P1_i + P1_j - P0 = P0 + l_i + l_j.
  LogSum norm;
  norm.add(p0);
  std::vector<LogSum> per_class(C);
  for (std::size_t i = 0; i < C; ++i) {
    const double p1 = p0 + l[i];
    norm.add(p1);
    per_class[i].add(p1);
    for (std::size_t j = i + 1; j < C; ++j) {
      const double p2 = p1 + l[j];
      norm.add(p2);
      per_class[i].add(p2);
      per_class[j].add(p2);
    }
  }
  const double logn = norm.value();
  std::vector<double> out(C);
  for (std::size_t i = 0; i < C; ++i) {
    out[i] = std::min(1.0, std::exp(per_class[i].value() - logn));
  }
  return out;
}

PseudoLabelGrid pseudo_label_grid(const PosteriorGrid& teacher) {
  PseudoLabelGrid out(teacher.rows(), teacher.cols());
  for (std::size_t t = 0; t < teacher.rows(); ++t) {
    const auto row = dp_pseudo_label(teacher.row(t));
    std::copy(row.begin(), row.end(), out.row(t).begin());
  }
  return out;
}

}  // namespace crst
