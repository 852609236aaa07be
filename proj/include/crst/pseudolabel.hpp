// SPDX-License-Identifier: Apache-2.0
//
// Pseudo labels as the expectation over multi-hot label vectors with at most
// K simultaneously active classes, each weighted by its Bernoulli likelihood
// under the teacher posteriors.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "crst/common.hpp"

namespace crst {

using PseudoLabelGrid = RealMatrix;

inline constexpr double kPosteriorClamp = 1e-7;

/// Every label vector with at most K active classes and its normalised mass.
struct LabelEnumeration {
  std::size_t K = 0;
  std::size_t C = 0;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<double> probs;
  double normalizer = 0.0;  // sum of unnormalised likelihoods
};

/// sum_{k=0..K} C choose k.
std::uint64_t label_count(std::size_t C, std::size_t K);

/// Brute-force expectation; meant as a reference and for K > 2.
std::vector<double> enumerate_pseudo_label(std::span<const double> post, std::size_t K,
                                           LabelEnumeration* detail = nullptr);

/// K = 2 in O(C^2) using log-domain partial sums.
std::vector<double> dp_pseudo_label(std::span<const double> post);

/// Applies dp_pseudo_label frame by frame.
PseudoLabelGrid pseudo_label_grid(const PosteriorGrid& teacher);

}  // namespace crst
