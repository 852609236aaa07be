// SPDX-License-Identifier: Apache-2.0

#include "crst/reliability.hpp"

#include <algorithm>
#include <cmath>

namespace crst {

namespace {

// a * log2(a / m) with 0 log 0 = 0.
double kl_term(double a, double m) { return a > 0.0 ? a * std::log2(a / m) : 0.0; }

double bernoulli_jsd(double p, double q) {
  const double m = 0.5 * (p + q);
  const double kp = kl_term(p, m) + kl_term(1.0 - p, 1.0 - m);
  const double kq = kl_term(q, m) + kl_term(1.0 - q, 1.0 - m);
  return std::clamp(0.5 * kp + 0.5 * kq, 0.0, 1.0);
}

}  // namespace

void RampSchedule::validate() const {
  if (total_steps < 1) {
    throw InvalidInput("ramp schedule needs at least one step");
  }
  if (!(peak >= 0.0)) {
    throw InvalidInput("ramp peak must be non-negative");
  }
}

double ramp_weight(std::size_t t, const RampSchedule& sched) {
  sched.validate();
  const double x = static_cast<double>(std::min(t, sched.total_steps)) /
                   static_cast<double>(sched.total_steps);
  return sched.peak * std::exp(-5.0 * (1.0 - x) * (1.0 - x));
}

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw InvalidInput("jsd: length mismatch");
  }
  if (p.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += bernoulli_jsd(p[i], q[i]);
  }
  return sum / static_cast<double>(p.size());
}

double reliability_strong(std::span<const PseudoLabelGrid> pseudo,
                          std::span<const StrongLabelGrid> truth, double omega) {
  if (pseudo.size() != truth.size()) {
    throw InvalidInput("reliability_strong: batch size mismatch");
  }
  if (pseudo.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  std::vector<double> t;
  for (std::size_t n = 0; n < pseudo.size(); ++n) {
    const auto& y = truth[n].data;
    if (!pseudo[n].same_shape(RealMatrix(y.rows(), y.cols()))) {
      throw InvalidInput("reliability_strong: grid shape mismatch");
    }
    t.assign(y.values().begin(), y.values().end());
    acc += 1.0 - jsd(pseudo[n].values(), t);
  }
  return omega * acc / static_cast<double>(pseudo.size());
}

double reliability_weak(std::span<const std::vector<double>> pseudo_clip,
                        std::span<const WeakLabel> truth, double omega) {
  if (pseudo_clip.size() != truth.size()) {
    throw InvalidInput("reliability_weak: batch size mismatch");
  }
  if (pseudo_clip.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  for (std::size_t n = 0; n < pseudo_clip.size(); ++n) {
    const std::vector<double> t(truth[n].data.begin(), truth[n].data.end());
    acc += 1.0 - jsd(pseudo_clip[n], t);
  }
  return omega * acc / static_cast<double>(pseudo_clip.size());
}

}  // namespace crst
