// SPDX-License-Identifier: Apache-2.0

#include "crst/losses.hpp"

#include <algorithm>
#include <cmath>

#include "crst/model.hpp"

namespace crst {

namespace {

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InvalidInput(std::string(what) + ": size mismatch");
  }
}

std::vector<RealMatrix> zeros_like(std::span<const PosteriorGrid> outs) {
  std::vector<RealMatrix> g;
  g.reserve(outs.size());
  for (const auto& o : outs) {
    g.emplace_back(o.rows(), o.cols());
  }
  return g;
}

double inv_count(std::size_t n) { return n > 0 ? 1.0 / static_cast<double>(n) : 0.0; }

// Batch mean of per-clip MSE, with optional gradient accumulation.
double mean_mse(std::span<const PosteriorGrid> outs, std::span<const RealMatrix> targets,
                double weight, std::size_t denom, std::vector<RealMatrix>* grads) {
  check_same(outs.size(), targets.size(), "mse batch");
  double acc = 0.0;
  const double s = inv_count(denom);
  for (std::size_t n = 0; n < outs.size(); ++n) {
    if (!outs[n].same_shape(targets[n])) {
      throw InvalidInput("mse: grid shape mismatch");
    }
    acc += mse(outs[n].values(), targets[n].values());
    if (grads != nullptr) {
      mse_grad(outs[n].values(), targets[n].values(), weight * s, (*grads)[n].values());
    }
  }
  return acc * s;
}

void classification(const LabeledOutputs& lab, LossBreakdown& out, LossGrads* grads) {
  check_same(lab.strong_out.size(), lab.strong_y.size(), "strong batch");
  check_same(lab.weak_out.size(), lab.weak_y.size(), "weak batch");
  if (grads != nullptr) {
    grads->strong = zeros_like(lab.strong_out);
    grads->weak = zeros_like(lab.weak_out);
  }
  const double ss = inv_count(lab.strong_out.size());
  for (std::size_t n = 0; n < lab.strong_out.size(); ++n) {
    const auto& o = lab.strong_out[n];
    if (!o.same_shape(lab.strong_y[n])) {
      throw InvalidInput("strong label grid does not match the output grid");
    }
    out.strong += bce(o.values(), lab.strong_y[n].values()) * ss;
    if (grads != nullptr) {
      bce_grad(o.values(), lab.strong_y[n].values(), ss, grads->strong[n].values());
    }
  }
  const double sw = inv_count(lab.weak_out.size());
  for (std::size_t n = 0; n < lab.weak_out.size(); ++n) {
    const auto& o = lab.weak_out[n];
    const auto pooled = clip_pool(o);
    check_same(pooled.size(), lab.weak_y[n].size(), "weak label");
    out.weak += bce(pooled, lab.weak_y[n]) * sw;
    if (grads != nullptr && o.rows() > 0) {
      std::vector<double> gp(pooled.size(), 0.0);
      bce_grad(pooled, lab.weak_y[n], sw, gp);
      grads->weak[n] = clip_pool_backward(gp, o.rows());
    }
  }
}

}  // namespace

double bce(std::span<const double> pred, std::span<const double> target) {
  check_same(pred.size(), target.size(), "bce");
  if (pred.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kBceClamp, 1.0 - kBceClamp);
    acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log1p(-p);
  }
  return acc / static_cast<double>(pred.size());
}

void bce_grad(std::span<const double> pred, std::span<const double> target, double scale,
              std::span<double> grad) {
  check_same(pred.size(), target.size(), "bce");
  check_same(pred.size(), grad.size(), "bce gradient");
  if (pred.empty()) {
    return;
  }
  const double s = scale / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    if (p <= kBceClamp || p >= 1.0 - kBceClamp) {
      continue;  // flat outside the clamp
    }
    grad[i] += s * (p - target[i]) / (p * (1.0 - p));
  }
}

double mse(std::span<const double> pred, std::span<const double> target) {
  check_same(pred.size(), target.size(), "mse");
  if (pred.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

void mse_grad(std::span<const double> pred, std::span<const double> target, double scale,
              std::span<double> grad) {
  check_same(pred.size(), target.size(), "mse");
  check_same(pred.size(), grad.size(), "mse gradient");
  if (pred.empty()) {
    return;
  }
  const double s = 2.0 * scale / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    grad[i] += s * (pred[i] - target[i]);
  }
}

StrongTarget pool_strong_labels(const StrongLabelGrid& y, std::size_t factor) {
  if (factor == 0) {
    throw InvalidInput("pool factor must be positive");
  }
  const std::size_t frames = y.data.rows() / factor;
  StrongTarget out(frames, y.data.cols());
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < y.data.cols(); ++c) {
      std::size_t on = 0;
      for (std::size_t k = 0; k < factor; ++k) {
        on += y.data(t * factor + k, c) != 0 ? 1 : 0;
      }
      out(t, c) = 2 * on >= factor ? 1.0 : 0.0;
    }
  }
  return out;
}

WeakTarget to_weak_target(const WeakLabel& y) { return {y.data.begin(), y.data.end()}; }

LossBreakdown loss_supervised(const LabeledOutputs& lab, LossGrads* grads) {
  if (lab.strong_out.empty() && lab.weak_out.empty()) {
    throw InvalidInput("supervised loss needs strong or weak labels");
  }
  LossBreakdown out;
  classification(lab, out, grads);
  out.total = out.strong + out.weak;
  return out;
}

LossBreakdown loss_mt(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                      std::span<const PosteriorGrid> teacher_strong,
                      std::span<const PosteriorGrid> teacher_weak,
                      std::span<const PosteriorGrid> teacher_unlabeled, double delta,
                      LossGrads* grads) {
  LossBreakdown out;
  classification(lab, out, grads);
  if (grads != nullptr) {
    grads->unlabeled = zeros_like(unlabeled_out);
  }
  const std::size_t n = lab.strong_out.size() + lab.weak_out.size() + unlabeled_out.size();
  const double cs = mean_mse(lab.strong_out, teacher_strong, delta, n,
                             grads ? &grads->strong : nullptr);
  const double cw = mean_mse(lab.weak_out, teacher_weak, delta, n, grads ? &grads->weak : nullptr);
  const double cu = mean_mse(unlabeled_out, teacher_unlabeled, delta, n,
                             grads ? &grads->unlabeled : nullptr);
  out.mse_u = cs + cw + cu;
  out.weight_u = delta;
  out.expectation = delta * out.mse_u;
  out.total = out.strong + out.weak + out.expectation;
  return out;
}

LossBreakdown loss_ict(const LabeledOutputs& lab, std::span<const PosteriorGrid> mixed_out,
                       std::span<const PosteriorGrid> teacher_a,
                       std::span<const PosteriorGrid> teacher_b, double lambda, double delta,
                       LossGrads* grads) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidInput("ict: lambda must lie in [0,1]");
  }
  check_same(mixed_out.size(), teacher_a.size(), "ict teacher");
  check_same(mixed_out.size(), teacher_b.size(), "ict teacher");
  LossBreakdown out;
  classification(lab, out, grads);
  std::vector<RealMatrix> targets;
  targets.reserve(mixed_out.size());
  for (std::size_t n = 0; n < mixed_out.size(); ++n) {
    if (!teacher_a[n].same_shape(teacher_b[n])) {
      throw InvalidInput("ict: teacher grid shape mismatch");
    }
    RealMatrix t(teacher_a[n].rows(), teacher_a[n].cols());
    for (std::size_t i = 0; i < t.size(); ++i) {
      t.values()[i] =
          lambda * teacher_a[n].values()[i] + (1.0 - lambda) * teacher_b[n].values()[i];
    }
    targets.push_back(std::move(t));
  }
  if (grads != nullptr) {
    grads->mixed = zeros_like(mixed_out);
  }
  out.mse_u = mean_mse(mixed_out, targets, delta, mixed_out.size(),
                       grads ? &grads->mixed : nullptr);
  out.weight_u = delta;
  out.expectation = delta * out.mse_u;
  out.total = out.strong + out.weak + out.expectation;
  return out;
}

double srst_gamma(std::span<const PseudoLabelGrid> pseudo_strong,
                  std::span<const StrongTarget> strong_y, double omega) {
  check_same(pseudo_strong.size(), strong_y.size(), "srst gamma");
  if (pseudo_strong.empty()) {
    return 0.0;
  }
  double b = 0.0;
  for (std::size_t n = 0; n < pseudo_strong.size(); ++n) {
    if (!pseudo_strong[n].same_shape(strong_y[n])) {
      throw InvalidInput("srst gamma: grid shape mismatch");
    }
    b += bce(pseudo_strong[n].values(), strong_y[n].values());
  }
  b /= static_cast<double>(pseudo_strong.size());
  if (b <= 0.0) {
    return kSrstGammaMax;
  }
  return std::min(omega / b, kSrstGammaMax);
}

LossBreakdown loss_srst(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                        std::span<const PseudoLabelGrid> pseudo_weak,
                        std::span<const PseudoLabelGrid> pseudo_unlabeled, double gamma,
                        LossGrads* grads) {
  LossBreakdown out;
  classification(lab, out, grads);
  if (grads != nullptr) {
    grads->unlabeled = zeros_like(unlabeled_out);
  }
  const std::size_t n = lab.weak_out.size() + unlabeled_out.size();
  out.mse_w = mean_mse(lab.weak_out, pseudo_weak, gamma, n, grads ? &grads->weak : nullptr);
  out.mse_u = mean_mse(unlabeled_out, pseudo_unlabeled, gamma, n,
                       grads ? &grads->unlabeled : nullptr);
  out.weight_u = gamma;
  out.weight_w = gamma;
  out.expectation = gamma * (out.mse_u + out.mse_w);
  out.total = out.strong + out.weak + out.expectation;
  return out;
}

LossBreakdown loss_crst(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                        std::span<const PseudoLabelGrid> pseudo_weak,
                        std::span<const PseudoLabelGrid> pseudo_unlabeled, double gamma_s,
                        double gamma_w, LossGrads* grads) {
  if ((pseudo_weak.empty() && !lab.weak_out.empty()) ||
      (pseudo_unlabeled.empty() && !unlabeled_out.empty())) {
    throw InvalidInput("crst loss: missing pseudo-label grids");
  }
  LossBreakdown out;
  classification(lab, out, grads);
  if (grads != nullptr) {
    grads->unlabeled = zeros_like(unlabeled_out);
  }
  out.mse_u = mean_mse(unlabeled_out, pseudo_unlabeled, gamma_s, unlabeled_out.size(),
                       grads ? &grads->unlabeled : nullptr);
  out.mse_w = mean_mse(lab.weak_out, pseudo_weak, gamma_w, lab.weak_out.size(),
                       grads ? &grads->weak : nullptr);
  out.weight_u = gamma_s;
  out.weight_w = gamma_w;
  out.expectation = gamma_s * out.mse_u + gamma_w * out.mse_w;
  out.total = out.strong + out.weak + out.expectation;
  return out;
}

}  // namespace crst
