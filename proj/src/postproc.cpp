// SPDX-License-Identifier: Apache-2.0

#include "crst/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace crst {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kShapeEps = 1e-6;

double normal_logpdf(double x, const GaussianComponent& g) {
  const double d = x - g.mean;
  return -0.5 * std::log(2.0 * kPi * g.var) - 0.5 * d * d / g.var;
}

}  // namespace

// ---------------------------------------------------------------------------
// Nelder-Mead
// ---------------------------------------------------------------------------

NelderMeadResult nelder_mead(const Objective& f, std::vector<double> x0,
                             const NelderMeadConfig& cfg) {
  const std::size_t n = x0.size();
  if (n == 0) {
    throw InvalidInput("nelder_mead: empty starting point");
  }
  const double f0 = f(x0);
  if (!std::isfinite(f0)) {
    throw NumericError("nelder_mead: objective is not finite at the starting point");
  }
  struct Vertex {
    std::vector<double> x;
    double fx;
  };
  std::vector<Vertex> simplex;
  simplex.push_back({x0, f0});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x = x0;
    x[i] = x[i] != 0.0 ? 1.05 * x[i] : 0.00025;
    const double fx = f(x);
    simplex.push_back({std::move(x), fx});
  }

  auto diameter = [&] {
    double d = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        d = std::max(d, std::abs(simplex[i].x[j] - simplex[0].x[j]));
      }
    }
    return d;
  };
  auto blend = [&](const std::vector<double>& c, const std::vector<double>& x, double t) {
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = c[j] + t * (x[j] - c[j]);
    }
    return out;
  };
  auto less = [](const Vertex& a, const Vertex& b) {
    // NaN sorts last.
    if (std::isnan(a.fx)) return false;
    if (std::isnan(b.fx)) return true;
    return a.fx < b.fx;
  };

  NelderMeadResult res;
  std::size_t it = 0;
  for (; it < cfg.max_iterations; ++it) {
    std::stable_sort(simplex.begin(), simplex.end(), less);
    if (diameter() < cfg.tolerance) {
      res.converged = true;
      break;
    }
    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        centroid[j] += simplex[i].x[j] / static_cast<double>(n);
      }
    }
    Vertex& worst = simplex[n];
    auto xr = blend(centroid, worst.x, -cfg.reflection);
    const double fr = f(xr);
    if (fr < simplex[0].fx) {
      auto xe = blend(centroid, worst.x, -cfg.reflection * cfg.expansion);
      const double fe = f(xe);
      if (fe < fr) {
        worst = {std::move(xe), fe};
      } else {
        worst = {std::move(xr), fr};
      }
      continue;
    }
    if (fr < simplex[n - 1].fx) {
      worst = {std::move(xr), fr};
      continue;
    }
    bool accepted = false;
    if (fr < worst.fx) {
      // outside contraction
      auto xc = blend(centroid, xr, cfg.contraction);
      const double fc = f(xc);
      if (fc <= fr) {
        worst = {std::move(xc), fc};
        accepted = true;
      }
    } else {
      auto xc = blend(centroid, worst.x, cfg.contraction);
      const double fc = f(xc);
      if (fc < worst.fx) {
        worst = {std::move(xc), fc};
        accepted = true;
      }
    }
    if (!accepted) {
      for (std::size_t i = 1; i <= n; ++i) {
        simplex[i].x = blend(simplex[0].x, simplex[i].x, cfg.shrink);
        simplex[i].fx = f(simplex[i].x);
      }
    }
  }
  std::stable_sort(simplex.begin(), simplex.end(), less);
  if (!res.converged && diameter() < cfg.tolerance) {
    res.converged = true;
  }
  if (!std::isfinite(simplex[0].fx)) {
    throw NumericError("nelder_mead: no finite objective value found");
  }
  res.x = simplex[0].x;
  res.value = simplex[0].fx;
  res.iterations = it;
  return res;
}

// ---------------------------------------------------------------------------
// EM
// ---------------------------------------------------------------------------

EmResult em_two_cluster(std::span<const double> samples) {
  const std::size_t N = samples.size();
  if (N < 20) {
    throw InvalidInput("em_two_cluster: fewer than 20 samples");
  }
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / N;
  double var = 0.0;
  for (double x : samples) {
    var += (x - mean) * (x - mean);
  }
  var /= static_cast<double>(N);
  if (!(var > 0.0)) {
    throw InvalidInput("em_two_cluster: samples have zero variance");
  }
  const double sd = std::sqrt(var);
  const double floor = 1e-6 * var;
  GaussianComponent g[2] = {{mean - sd, var, 0.5}, {mean + sd, var, 0.5}};
  std::vector<double> resp(N);  // responsibility of component 1
  double prev_ll = -std::numeric_limits<double>::infinity();
  EmResult out;
  std::size_t it = 0;
  for (; it < 200; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double l0 = std::log(g[0].weight) + normal_logpdf(samples[i], g[0]);
      const double l1 = std::log(g[1].weight) + normal_logpdf(samples[i], g[1]);
      const double m = std::max(l0, l1);
      const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      resp[i] = std::exp(l1 - lse);
      ll += lse;
    }
    for (int k = 0; k < 2; ++k) {
      double w = 0.0;
      double mu = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double r = k == 1 ? resp[i] : 1.0 - resp[i];
        w += r;
        mu += r * samples[i];
      }
      if (w <= 0.0) {
        continue;  // empty component keeps its previous parameters
      }
      mu /= w;
      double v = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double r = k == 1 ? resp[i] : 1.0 - resp[i];
        v += r * (samples[i] - mu) * (samples[i] - mu);
      }
      g[k] = {mu, std::max(v / w, floor), std::clamp(w / N, 1e-12, 1.0)};
    }
    if (std::abs(ll - prev_ll) < 1e-9) {
      ++it;
      break;
    }
    prev_ll = ll;
  }
  const int hi = g[1].mean >= g[0].mean ? 1 : 0;
  out.high = g[hi];
  out.low = g[1 - hi];
  out.iterations = it;
  // Final assignment by maximum responsibility under the fitted mixture.
  for (std::size_t i = 0; i < N; ++i) {
    const double lh = std::log(out.high.weight) + normal_logpdf(samples[i], out.high);
    const double ll = std::log(out.low.weight) + normal_logpdf(samples[i], out.low);
    if (lh > ll) {
      out.target.push_back(samples[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// GPD / EVT
// ---------------------------------------------------------------------------

double gpd_loglik(std::span<const double> z, double a, double c) {
  if (!(a > 0.0)) {
    return -std::numeric_limits<double>::infinity();
  }
  const double n = static_cast<double>(z.size());
  if (std::abs(c) < kShapeEps) {
    const double s = std::accumulate(z.begin(), z.end(), 0.0);
    return -n * std::log(a) - s / a;
  }
  double s = 0.0;
  for (double zi : z) {
    const double arg = 1.0 + c * zi / a;
    if (!(arg > 0.0)) {
      return -std::numeric_limits<double>::infinity();
    }
    s += std::log1p(c * zi / a);
  }
  return -n * std::log(a) - (1.0 + 1.0 / c) * s;
}

GpdFit fit_gpd(std::span<const double> z) {
  std::size_t positive = 0;
  for (double v : z) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw InvalidInput("fit_gpd: excesses must be finite and non-negative");
    }
    positive += v > 0.0 ? 1 : 0;
  }
  if (positive < 10) {
    throw InvalidInput("fit_gpd: need at least 10 positive excesses");
  }
  const double n = static_cast<double>(z.size());
  const double m = std::accumulate(z.begin(), z.end(), 0.0) / n;
  double v = 0.0;
  for (double x : z) {
    v += (x - m) * (x - m);
  }
  v /= n;
  // Method-of-moments start, kept inside a well-behaved range.
  double c0 = v > 0.0 ? 0.5 * (1.0 - m * m / v) : 0.0;
  c0 = std::clamp(c0, -0.45, 0.45);
  const double a0 = std::max(m * (1.0 - c0), 1e-6);
  const double zmax = *std::max_element(z.begin(), z.end());

  auto objective = [&](std::span<const double> p) {
    const double a = std::exp(p[0]);
    const double c = p[1];
    // Infeasible points get a large value that still grows with the
    // violation, so the simplex is pushed back inside.
    double violation = 0.0;
    if (c <= -1.0) {
      violation += -1.0 - c + 1.0;
    }
    const double arg = 1.0 + c * zmax / a;
    if (!(arg > 0.0)) {
      violation += 1.0 - arg;
    }
    if (violation > 0.0) {
      return 1e100 * (1.0 + violation);
    }
    return -gpd_loglik(z, a, c);
  };
  NelderMeadResult r = nelder_mead(objective, {std::log(a0), c0});
  // One restart from the optimum guards against early collapse of the simplex.
  r = nelder_mead(objective, r.x);
  GpdFit fit;
  fit.a = std::exp(r.x[0]);
  fit.c = r.x[1];
  fit.loglik = -r.value;
  return fit;
}

double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) {
    throw InvalidInput("quantile of an empty sample");
  }
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

bool evt_fit(std::span<const double> target_logits, EvtFit& out) {
  out = EvtFit{};
  out.N = target_logits.size();
  if (target_logits.empty()) {
    return false;
  }
  std::vector<double> rev(target_logits.size());
  std::transform(target_logits.begin(), target_logits.end(), rev.begin(),
                 [](double x) { return -x; });
  out.u = empirical_quantile(rev, 0.9);
  std::vector<double> z;
  for (double r : rev) {
    if (r > out.u) {
      z.push_back(r - out.u);
    }
  }
  out.n = z.size();
  if (z.size() < 10) {
    return false;
  }
  const GpdFit g = fit_gpd(z);
  out.a = g.a;
  out.c = g.c;
  return true;
}

double evt_quantile(const EvtFit& fit, double alpha) {
  if (fit.n == 0) {
    throw InvalidInput("evt_quantile: no excesses");
  }
  if (!(alpha > 0.0)) {
    throw InvalidInput("evt_quantile: alpha must be positive");
  }
  const double ratio = static_cast<double>(fit.N) * alpha / static_cast<double>(fit.n);
  if (std::abs(fit.c) < kShapeEps) {
    return fit.u - fit.a * std::log(ratio);
  }
  return fit.u + (fit.a / fit.c) * (std::pow(ratio, -fit.c) - 1.0);
}

EvtThreshold evt_threshold(std::span<const double> target_logits, double alpha) {
  EvtThreshold out;
  if (!evt_fit(target_logits, out.fit)) {
    out.fallback = true;
    out.threshold = kGlobalThreshold;
    out.t_alpha = -logit(kGlobalThreshold);
    return out;
  }
  out.t_alpha = evt_quantile(out.fit, alpha);
  out.threshold = sigmoid(-out.t_alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Smoothing and intervals
// ---------------------------------------------------------------------------

std::size_t round_to_odd(double x) {
  if (!(x >= 1.0)) {
    return 1;
  }
  auto lo = static_cast<std::size_t>(std::floor(x));
  if (lo % 2 == 0) {
    --lo;
  }
  const double dlo = x - static_cast<double>(lo);
  const double dhi = static_cast<double>(lo + 2) - x;
  return dhi < dlo ? lo + 2 : lo;
}

std::size_t filter_length_seconds(double seconds, double fps) {
  return round_to_odd(seconds * fps);
}

std::vector<std::uint8_t> median_smooth(std::span<const std::uint8_t> x, std::size_t len) {
  if (len == 0 || len % 2 == 0) {
    throw InvalidInput("median filter length must be odd");
  }
  const std::size_t n = x.size();
  std::vector<std::uint8_t> out(n);
  if (n == 0) {
    return out;
  }
  const long half = static_cast<long>(len / 2);
  auto at = [&](long i) { return x[static_cast<std::size_t>(std::clamp(i, 0L, long(n) - 1))] != 0; };
  long ones = 0;
  for (long k = -half; k <= half; ++k) {
    ones += at(k) ? 1 : 0;
  }
  for (long i = 0; i < static_cast<long>(n); ++i) {
    out[i] = 2 * ones > static_cast<long>(len) ? 1 : 0;
    ones += (at(i + half + 1) ? 1 : 0) - (at(i - half) ? 1 : 0);
  }
  return out;
}

BinaryMatrix threshold_grid(const PosteriorGrid& p, std::span<const double> thresholds) {
  if (thresholds.size() != p.cols()) {
    throw InvalidInput("threshold count does not match the class count");
  }
  BinaryMatrix out(p.rows(), p.cols());
  for (std::size_t t = 0; t < p.rows(); ++t) {
    for (std::size_t c = 0; c < p.cols(); ++c) {
      out(t, c) = p(t, c) > thresholds[c] ? 1 : 0;
    }
  }
  return out;
}

std::vector<EventInterval> extract_intervals(const BinaryMatrix& active, double fps) {
  std::vector<EventInterval> out;
  for (std::size_t c = 0; c < active.cols(); ++c) {
    std::size_t t = 0;
    while (t < active.rows()) {
      if (active(t, c) == 0) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < active.rows() && active(t, c) != 0) {
        ++t;
      }
      out.push_back({static_cast<int>(c), static_cast<double>(start) / fps,
                     static_cast<double>(t) / fps});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const EventInterval& a, const EventInterval& b) {
    return a.onset < b.onset || (a.onset == b.onset && a.class_id < b.class_id);
  });
  return out;
}

namespace {

BinaryMatrix smooth_columns(const BinaryMatrix& active, std::span<const std::size_t> lens) {
  BinaryMatrix out(active.rows(), active.cols());
  std::vector<std::uint8_t> col(active.rows());
  for (std::size_t c = 0; c < active.cols(); ++c) {
    for (std::size_t t = 0; t < active.rows(); ++t) {
      col[t] = active(t, c);
    }
    const auto s = median_smooth(col, lens[c]);
    for (std::size_t t = 0; t < active.rows(); ++t) {
      out(t, c) = s[t];
    }
  }
  return out;
}

}  // namespace

std::vector<EventInterval> global_postproc(const PosteriorGrid& p, double fps) {
  ClasswiseParams params;
  params.thresholds.assign(p.cols(), kGlobalThreshold);
  params.filter_len.assign(p.cols(), filter_length_seconds(kGlobalFilterSeconds, fps));
  return classwise_postproc(p, params, fps);
}

void ClasswiseParams::validate(std::size_t n_classes) const {
  if (thresholds.size() != n_classes || filter_len.size() != n_classes) {
    throw InvalidInput("classwise parameters missing for some classes");
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (!(thresholds[c] > 0.0 && thresholds[c] < 1.0)) {
      throw InvalidInput("classwise threshold outside (0,1)");
    }
    if (filter_len[c] % 2 == 0) {
      throw InvalidInput("classwise filter length must be odd");
    }
  }
}

std::string ClasswiseParams::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < thresholds.size(); ++c) {
    nlohmann::json j{{"class", c}, {"threshold", thresholds[c]}, {"filter_frames", filter_len[c]}};
    if (c < info.size()) {
      const auto& i = info[c];
      j["evt"] = {{"u", i.evt.fit.u}, {"a", i.evt.fit.a},     {"c", i.evt.fit.c},
                  {"n", i.evt.fit.n}, {"N", i.evt.fit.N},     {"t_alpha", i.evt.t_alpha}};
      j["mean_run_frames"] = i.mean_run_frames;
      j["samples"] = i.n_samples;
      j["threshold_fallback"] = i.threshold_fallback;
      j["filter_fallback"] = i.filter_fallback;
      if (!i.note.empty()) {
        j["note"] = i.note;
      }
    }
    classes.push_back(std::move(j));
  }
  return nlohmann::json{{"classes", classes}}.dump(2);
}

std::vector<EventInterval> classwise_postproc(const PosteriorGrid& p,
                                              const ClasswiseParams& params, double fps) {
  params.validate(p.cols());
  const BinaryMatrix active = threshold_grid(p, params.thresholds);
  return extract_intervals(smooth_columns(active, params.filter_len), fps);
}

std::vector<double> collect_logit_samples(std::span<const PosteriorGrid> outputs,
                                          std::span<const WeakLabel> labels, std::size_t c) {
  if (outputs.size() != labels.size()) {
    throw InvalidInput("collect_logit_samples: clip count mismatch");
  }
  std::vector<double> out;
  bool any = false;
  for (std::size_t n = 0; n < outputs.size(); ++n) {
    if (c >= labels[n].data.size() || labels[n].data[c] == 0) {
      continue;
    }
    any = true;
    for (std::size_t t = 0; t < outputs[n].rows(); ++t) {
      const double p = std::clamp(outputs[n](t, c), 1e-12, 1.0 - 1e-12);
      out.push_back(logit(p));
    }
  }
  if (!any) {
    throw InvalidInput("no weakly labeled clip contains class " + std::to_string(c));
  }
  return out;
}

FilterLength estimate_filter_len(std::span<const BinaryMatrix> grids, std::size_t c,
                                 double beta_percent, double fps) {
  std::size_t runs = 0;
  std::size_t frames = 0;
  for (const auto& g : grids) {
    std::size_t t = 0;
    while (t < g.rows()) {
      if (g(t, c) == 0) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < g.rows() && g(t, c) != 0) {
        ++t;
      }
      ++runs;
      frames += t - start;
    }
  }
  FilterLength out;
  if (runs == 0) {
    out.fallback = true;
    out.frames = filter_length_seconds(kGlobalFilterSeconds, fps);
    return out;
  }
  out.mean_run = static_cast<double>(frames) / static_cast<double>(runs);
  out.frames = round_to_odd(out.mean_run * beta_percent / 100.0);
  return out;
}

std::vector<ClassEvtModel> fit_class_models(std::span<const PosteriorGrid> weak_outputs,
                                            std::span<const WeakLabel> weak_labels,
                                            std::size_t n_classes) {
  std::vector<ClassEvtModel> models(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassEvtModel& m = models[c];
    try {
      m.samples = collect_logit_samples(weak_outputs, weak_labels, c);
      const EmResult em = em_two_cluster(m.samples);
      m.target = em.target;
      m.usable = evt_fit(m.target, m.fit);
      if (!m.usable) {
        m.note = "too few extreme samples";
      }
    } catch (const InvalidInput& e) {
      m.usable = false;
      m.note = e.what();
    }
  }
  return models;
}

ClasswiseParams classwise_params(const std::vector<ClassEvtModel>& models,
                                 std::span<const PosteriorGrid> weak_outputs,
                                 std::span<const WeakLabel> weak_labels, double alpha,
                                 double beta_percent, double fps) {
  const std::size_t C = models.size();
  ClasswiseParams params;
  params.thresholds.resize(C);
  params.filter_len.resize(C);
  params.info.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    ClassFitInfo& info = params.info[c];
    const ClassEvtModel& m = models[c];
    info.n_samples = m.samples.size();
    info.note = m.note;
    if (m.usable) {
      info.evt.fit = m.fit;
      info.evt.t_alpha = evt_quantile(m.fit, alpha);
      info.evt.threshold = sigmoid(-info.evt.t_alpha);
    } else {
      info.evt.fallback = true;
    }
    // Keep the threshold strictly inside (0,1) even for extreme tails.
    double thr = info.evt.threshold;
    if (!(thr > 1e-9 && thr < 1.0 - 1e-9)) {
      thr = std::clamp(std::isfinite(thr) ? thr : kGlobalThreshold, 1e-9, 1.0 - 1e-9);
    }
    info.threshold_fallback = info.evt.fallback;
    params.thresholds[c] = thr;

    std::vector<BinaryMatrix> grids;
    for (std::size_t n = 0; n < weak_outputs.size(); ++n) {
      if (c < weak_labels[n].data.size() && weak_labels[n].data[c] != 0) {
        BinaryMatrix g(weak_outputs[n].rows(), C);
        for (std::size_t t = 0; t < g.rows(); ++t) {
          g(t, c) = weak_outputs[n](t, c) > thr ? 1 : 0;
        }
        grids.push_back(std::move(g));
      }
    }
    const FilterLength fl = estimate_filter_len(grids, c, beta_percent, fps);
    params.filter_len[c] = fl.frames;
    info.mean_run_frames = fl.mean_run;
    info.filter_fallback = fl.fallback;
  }
  return params;
}

ClasswiseParams fit_classwise(std::span<const PosteriorGrid> weak_outputs,
                              std::span<const WeakLabel> weak_labels, std::size_t n_classes,
                              double alpha, double beta_percent, double fps) {
  const auto models = fit_class_models(weak_outputs, weak_labels, n_classes);
  return classwise_params(models, weak_outputs, weak_labels, alpha, beta_percent, fps);
}

std::vector<double> alpha_grid(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0 && hi > lo) || n < 2) {
    throw InvalidInput("alpha grid needs 0 < lo < hi and at least two points");
  }
  std::vector<double> g(n);
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  g.front() = lo;
  g.back() = hi;
  return g;
}

std::vector<double> beta_grid(double lo, double hi, std::size_t n) {
  if (!(hi > lo) || n < 2) {
    throw InvalidInput("beta grid needs lo < hi and at least two points");
  }
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return g;
}

}  // namespace crst
