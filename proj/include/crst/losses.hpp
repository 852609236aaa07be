// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Every loss returns its value broken into parts and,
// when asked, the gradient with respect to each model output grid. Sums over
// clips are taken as batch means so that the scale does not depend on the
// batch composition.

#pragma once

#include <span>
#include <vector>

#include "crst/common.hpp"
#include "crst/pseudolabel.hpp"
#include "crst/seqdata.hpp"

namespace crst {

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kSrstGammaMax = 5.0;

/// Frame targets (possibly soft) at the model output rate.
using StrongTarget = RealMatrix;
/// Clip targets (possibly soft).
using WeakTarget = std::vector<double>;

struct LossBreakdown {
  double total = 0.0;
  double strong = 0.0;       // BCE on strong clips
  double weak = 0.0;         // BCE on clip-pooled weak clips
  double expectation = 0.0;  // weighted consistency / expectation part
  double weight_u = 0.0;     // delta, gamma or gamma^s
  double weight_w = 0.0;     // gamma^w (CRST only)
  double mse_u = 0.0;        // unweighted consistency/expectation terms
  double mse_w = 0.0;
};

/// d loss / d output for each output grid passed to a loss. Overwritten.
struct LossGrads {
  std::vector<RealMatrix> strong;
  std::vector<RealMatrix> weak;
  std::vector<RealMatrix> unlabeled;
  std::vector<RealMatrix> mixed;
};

/// Mean BCE over elements; predictions clamped to [1e-7, 1-1e-7].
double bce(std::span<const double> pred, std::span<const double> target);
/// Accumulates scale * d bce / d pred into grad.
void bce_grad(std::span<const double> pred, std::span<const double> target, double scale,
              std::span<double> grad);

double mse(std::span<const double> pred, std::span<const double> target);
void mse_grad(std::span<const double> pred, std::span<const double> target, double scale,
              std::span<double> grad);

/// Strong labels pooled in time by `factor`: a pooled frame is active when
/// at least half of its input frames are. Trailing frames are dropped.
StrongTarget pool_strong_labels(const StrongLabelGrid& y, std::size_t factor);
WeakTarget to_weak_target(const WeakLabel& y);

/// Labeled part of a batch shared by every objective.
struct LabeledOutputs {
  std::span<const PosteriorGrid> strong_out;
  std::span<const StrongTarget> strong_y;
  std::span<const PosteriorGrid> weak_out;
  std::span<const WeakTarget> weak_y;
};

LossBreakdown loss_supervised(const LabeledOutputs& lab, LossGrads* grads = nullptr);

/// Classification + delta * MSE(student, teacher) over strong, weak and
/// unlabeled clips. Teacher grids are constants.
LossBreakdown loss_mt(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                      std::span<const PosteriorGrid> teacher_strong,
                      std::span<const PosteriorGrid> teacher_weak,
                      std::span<const PosteriorGrid> teacher_unlabeled, double delta,
                      LossGrads* grads = nullptr);

/// Classification + delta * MSE(student(mix), lambda t_a + (1-lambda) t_b).
LossBreakdown loss_ict(const LabeledOutputs& lab, std::span<const PosteriorGrid> mixed_out,
                       std::span<const PosteriorGrid> teacher_a,
                       std::span<const PosteriorGrid> teacher_b, double lambda, double delta,
                       LossGrads* grads = nullptr);

/// min(omega / BCE(pseudo on strong clips, strong labels), 5); 5 when the BCE
/// vanishes and 0 without strong clips.
double srst_gamma(std::span<const PseudoLabelGrid> pseudo_strong,
                  std::span<const StrongTarget> strong_y, double omega);

/// Classification + gamma * MSE(student, pseudo) over weak and unlabeled clips.
LossBreakdown loss_srst(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                        std::span<const PseudoLabelGrid> pseudo_weak,
                        std::span<const PseudoLabelGrid> pseudo_unlabeled, double gamma,
                        LossGrads* grads = nullptr);

/// Classification + gamma_s * MSE over unlabeled + gamma_w * MSE over weak,
/// with pseudo labels and reliabilities supplied by the other model.
LossBreakdown loss_crst(const LabeledOutputs& lab, std::span<const PosteriorGrid> unlabeled_out,
                        std::span<const PseudoLabelGrid> pseudo_weak,
                        std::span<const PseudoLabelGrid> pseudo_unlabeled, double gamma_s,
                        double gamma_w, LossGrads* grads = nullptr);

}  // namespace crst
