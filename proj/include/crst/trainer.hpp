// SPDX-License-Identifier: Apache-2.0
//
// Training loops for the supervised baselines, mean teacher, interpolation
// consistency, self-referencing self-training and the two-model
// cross-referencing scheme, plus checkpoints and the step history.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crst/losses.hpp"
#include "crst/model.hpp"
#include "crst/seqdata.hpp"

namespace crst {

enum class Variant { SupervisedStrong, SupervisedSW, MT, ICT, SRST, SRSTAug, CRST };

std::string to_string(Variant v);
/// Accepts supervised-strong, supervised-sw, mt, ict, srst, srst-aug, crst.
Variant parse_variant(const std::string& name);

enum class Perturbation { Noise, Mixup, FrameShift };

std::string to_string(Perturbation p);
Perturbation parse_perturbation(const std::string& name);

/// Which network of model I is validated and used for detection.
enum class EvalNetwork { Student, Teacher };

std::string to_string(EvalNetwork n);
EvalNetwork parse_eval_network(const std::string& name);

struct BatchComposition {
  std::size_t strong = 6;
  std::size_t unlabeled = 12;
  std::size_t weak = 6;

  friend bool operator==(const BatchComposition&, const BatchComposition&) = default;
};

struct TrainConfig {
  Variant variant = Variant::CRST;
  ModelConfig model;
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 0;  // 0: ceil(|strong| / batch.strong)
  BatchComposition batch;
  double lr = 0.001;
  double lr_cap = 0.001;
  double ema_decay = 0.999;
  double omega_peak = 3.0;
  double delta_peak = 2.0;
  Perturbation perturbation = Perturbation::Noise;
  double snr_db = 30.0;
  double shift_sigma = 40.0;  // input frames
  EvalNetwork evaluate = EvalNetwork::Student;
  std::uint64_t seed = 1;

  void validate() const;
  /// Variant-specific requirements on the data splits.
  void check_dataset(const Dataset& ds) const;
  /// Batch composition after dropping the subsets the variant does not use.
  BatchComposition effective_batch() const;
  std::string to_json() const;
  std::uint64_t hash() const;
};

/// Indices into each split for one step.
struct Batch {
  std::vector<std::size_t> strong;
  std::vector<std::size_t> weak;
  std::vector<std::size_t> unlabeled;
};

struct SubsetSizes {
  std::size_t strong = 0;
  std::size_t weak = 0;
  std::size_t unlabeled = 0;
};

/// Pure function of (seed, step): each split is consumed in passes over
/// seeded permutations, so a pass visits every clip once before any repeats.
Batch make_batch(const SubsetSizes& sizes, const BatchComposition& comp, std::uint64_t seed,
                 std::size_t step);

struct ModelState {
  ModelParams student;
  ModelParams teacher;
  OptState opt;
};

struct TrainState {
  Variant variant = Variant::CRST;
  ModelConfig model;
  std::vector<ModelState> models;  // two for CRST, otherwise one
  std::size_t step = 0;
  std::uint64_t config_hash = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double omega = 0.0;
  double delta = 0.0;
  std::vector<LossBreakdown> losses;  // one per model
  std::optional<double> val_f;        // set on the last step of an epoch
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_val_f;
  std::size_t best_epoch = 0;  // 1-based; 0 means the initial state
  double best_f = -1.0;
};

struct TrainResult {
  TrainState final_state;
  TrainState best_state;
  TrainHistory history;
};

std::size_t steps_per_epoch(const TrainConfig& cfg, const Dataset& ds);

/// Model I's student or teacher.
const ModelParams& inference_params(const TrainState& st, EvalNetwork which);

TrainState init_state(const TrainConfig& cfg);

/// Prepared per-run data: pooled strong targets and the weak targets.
class TrainData {
 public:
  TrainData(const Dataset& ds, const TrainConfig& cfg);

  const Dataset& dataset() const { return *ds_; }
  SubsetSizes sizes() const;
  /// Features of a split item; for srst-aug indices past the split size
  /// address noisy copies.
  FeatureGrid strong_x(std::size_t i) const;
  FeatureGrid weak_x(std::size_t i) const;
  FeatureGrid unlabeled_x(std::size_t i) const;
  const StrongLabelGrid& strong_pooled(std::size_t i) const;
  const StrongTarget& strong_target(std::size_t i) const;
  const WeakTarget& weak_target(std::size_t i) const;
  const WeakLabel& weak_label(std::size_t i) const;

 private:
  FeatureGrid augmented(const FeatureGrid& x, int split, std::size_t i) const;
  std::size_t base(std::size_t i, std::size_t n) const { return i % n; }

  const Dataset* ds_;
  const TrainConfig* cfg_;
  bool doubled_;
  std::vector<StrongLabelGrid> pooled_;
  std::vector<StrongTarget> targets_;
  std::vector<WeakTarget> weak_targets_;
};

/// One optimisation step of the configured variant; advances state.step.
StepRecord train_step(TrainState& state, const TrainData& data, const TrainConfig& cfg,
                      const Batch& batch);

using StepCallback = std::function<void(const StepRecord&)>;

/// Full run with per-epoch validation and best-model selection.
TrainResult train(const Dataset& ds, const TrainConfig& cfg, const StepCallback& on_step = {});

/// Eval-mode posteriors of one parameter vector.
std::vector<PosteriorGrid> predict(const Model& model, const ModelParams& params,
                                   const std::vector<const FeatureGrid*>& xs);

/// Macro F of the given parameters on labeled clips with global post-processing.
double evaluate_macro_f(const Model& model, const ModelParams& params,
                        const std::vector<LabeledClip>& clips);

/// Frames per second at the model output.
double output_fps(const ModelConfig& model, double input_fps);

// Checkpoints -----------------------------------------------------------------

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Throws FormatError on corrupt files and ConfigError when `expect` is set
/// and the stored variant differs.
TrainState load_checkpoint(const std::filesystem::path& path,
                           std::optional<Variant> expect = std::nullopt);

std::string history_line(const StepRecord& rec);
void write_history_jsonl(const TrainHistory& h, const std::filesystem::path& path);

}  // namespace crst
