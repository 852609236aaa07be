// SPDX-License-Identifier: Apache-2.0
//
// Ramp-up weights and pseudo-label reliability from the Jensen-Shannon
// divergence against known labels.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "crst/common.hpp"
#include "crst/pseudolabel.hpp"
#include "crst/seqdata.hpp"

namespace crst {

struct RampSchedule {
  std::size_t total_steps = 1;
  double peak = 3.0;

  void validate() const;
};

/// peak * exp(-5 (1 - t/T)^2); t beyond T is clamped.
double ramp_weight(std::size_t t, const RampSchedule& sched);

/// Bernoulli JSD in bits between p_i and q_i, averaged over components.
double jsd(std::span<const double> p, std::span<const double> q);

/// omega * mean over clips of (1 - JSD(pseudo, truth)); 0 for an empty batch.
double reliability_strong(std::span<const PseudoLabelGrid> pseudo,
                          std::span<const StrongLabelGrid> truth, double omega);

/// Same with clip-pooled pseudo labels against weak labels.
double reliability_weak(std::span<const std::vector<double>> pseudo_clip,
                        std::span<const WeakLabel> truth, double omega);

}  // namespace crst
