// SPDX-License-Identifier: Apache-2.0
//
// From posteriors to event intervals. The global path uses one threshold and
// one median filter for every class. The classwise path picks a threshold
// per class from an extreme-value model of the logit distribution on weakly
// labeled clips, and a filter length proportional to the mean detected run.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "crst/common.hpp"
#include "crst/seqdata.hpp"

namespace crst {

inline constexpr double kGlobalThreshold = 0.5;
inline constexpr double kGlobalFilterSeconds = 0.445;

// Optimisation ----------------------------------------------------------------

struct NelderMeadConfig {
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
  double tolerance = 1e-9;  // simplex diameter
  std::size_t max_iterations = 2000;
};

struct NelderMeadResult {
  std::vector<double> x;
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

using Objective = std::function<double(std::span<const double>)>;

NelderMeadResult nelder_mead(const Objective& f, std::vector<double> x0,
                             const NelderMeadConfig& cfg = {});

// Clustering ------------------------------------------------------------------

struct GaussianComponent {
  double mean = 0.0;
  double var = 1.0;
  double weight = 0.5;
};

struct EmResult {
  std::vector<double> target;  // members of the higher-mean component
  GaussianComponent low;
  GaussianComponent high;
  std::size_t iterations = 0;
};

/// Two-component 1-D Gaussian mixture. Needs at least 20 samples with
/// nonzero spread.
EmResult em_two_cluster(std::span<const double> samples);

// Extreme values ----------------------------------------------------------------

struct GpdFit {
  double a = 1.0;  // scale
  double c = 0.0;  // shape
  double loglik = 0.0;
};

/// Sum of GPD log densities; -inf outside the support.
double gpd_loglik(std::span<const double> z, double a, double c);

/// Maximum-likelihood GPD parameters for non-negative excesses (n >= 10).
GpdFit fit_gpd(std::span<const double> z);

struct EvtFit {
  double u = 0.0;  // in the reversed logit domain
  double a = 1.0;
  double c = 0.0;
  std::size_t n = 0;  // excesses above u
  std::size_t N = 0;  // all samples
};

/// Reverses the samples, takes their 0.9 quantile as u and fits the excesses.
/// Returns false (leaving `out` with u, n and N filled) when fewer than ten
/// excesses are available.
bool evt_fit(std::span<const double> target_logits, EvtFit& out);

/// t_alpha in the reversed logit domain.
double evt_quantile(const EvtFit& fit, double alpha);

struct EvtThreshold {
  double threshold = kGlobalThreshold;  // probability domain
  double t_alpha = 0.0;
  EvtFit fit;
  bool fallback = false;
};

/// sigma(-t_alpha) for the given target-cluster logits; falls back to the
/// global threshold when the tail is empty.
EvtThreshold evt_threshold(std::span<const double> target_logits, double alpha);

/// Empirical quantile with linear interpolation between order statistics.
double empirical_quantile(std::vector<double> v, double q);

// Smoothing and intervals -------------------------------------------------------

/// Nearest odd integer >= 1; halfway cases go to the smaller one.
std::size_t round_to_odd(double x);

/// Filter length for a duration in seconds at a frame rate.
std::size_t filter_length_seconds(double seconds, double fps);

/// Sliding binary median with edge replication; `len` must be odd.
std::vector<std::uint8_t> median_smooth(std::span<const std::uint8_t> x, std::size_t len);

/// Strict `>` comparison per class.
BinaryMatrix threshold_grid(const PosteriorGrid& p, std::span<const double> thresholds);

/// Maximal runs of ones per class; onset = start/fps, offset = (end+1)/fps.
std::vector<EventInterval> extract_intervals(const BinaryMatrix& active, double fps);

std::vector<EventInterval> global_postproc(const PosteriorGrid& p, double fps);

struct ClassFitInfo {
  EvtThreshold evt;
  double mean_run_frames = 0.0;
  std::size_t n_samples = 0;
  bool threshold_fallback = false;
  bool filter_fallback = false;
  std::string note;
};

struct ClasswiseParams {
  std::vector<double> thresholds;
  std::vector<std::size_t> filter_len;
  std::vector<ClassFitInfo> info;  // diagnostics, may be empty

  void validate(std::size_t n_classes) const;
  std::string to_json() const;
};

std::vector<EventInterval> classwise_postproc(const PosteriorGrid& p,
                                              const ClasswiseParams& params, double fps);

/// Logit samples for class c from clips whose weak label contains c.
std::vector<double> collect_logit_samples(std::span<const PosteriorGrid> outputs,
                                          std::span<const WeakLabel> labels, std::size_t c);

struct FilterLength {
  std::size_t frames = 1;
  double mean_run = 0.0;
  bool fallback = false;
};

/// beta percent of the mean run length of class c over the given grids.
FilterLength estimate_filter_len(std::span<const BinaryMatrix> grids, std::size_t c,
                                 double beta_percent, double fps);

/// Per-class EVT state that does not depend on alpha or beta.
struct ClassEvtModel {
  std::vector<double> samples;
  std::vector<double> target;
  EvtFit fit;
  bool usable = false;
  std::string note;
};

std::vector<ClassEvtModel> fit_class_models(std::span<const PosteriorGrid> weak_outputs,
                                            std::span<const WeakLabel> weak_labels,
                                            std::size_t n_classes);

ClasswiseParams classwise_params(const std::vector<ClassEvtModel>& models,
                                 std::span<const PosteriorGrid> weak_outputs,
                                 std::span<const WeakLabel> weak_labels, double alpha,
                                 double beta_percent, double fps);

/// Convenience: fit_class_models followed by classwise_params.
ClasswiseParams fit_classwise(std::span<const PosteriorGrid> weak_outputs,
                              std::span<const WeakLabel> weak_labels, std::size_t n_classes,
                              double alpha, double beta_percent, double fps);

/// n log-spaced points in [lo, hi].
std::vector<double> alpha_grid(double lo = 0.0002, double hi = 0.1, std::size_t n = 10);
/// n linear points in [lo, hi] percent.
std::vector<double> beta_grid(double lo = 5.0, double hi = 100.0, std::size_t n = 20);

}  // namespace crst
