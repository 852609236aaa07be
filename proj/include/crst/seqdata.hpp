// SPDX-License-Identifier: Apache-2.0
//
// Feature grids, labels, synthetic scene generation, preprocessing and the
// three input perturbations (additive noise at an SNR, mixup, frame shift).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crst/common.hpp"

namespace crst {

struct PreprocConfig {
  double sample_rate = 16000.0;
  std::size_t fft_len = 2048;
  std::size_t hop = 255;
  std::size_t n_mel = 128;
  double mel_fmin = 0.0;
  double mel_fmax = 8000.0;
  double floor_eps = 1.0e-5;
  double clip_len = 10.0;  // seconds

  void validate() const;
};

/// frames x channels real features with their frame rate.
struct FeatureGrid {
  RealMatrix data;
  double fps = 0.0;

  std::size_t frames() const { return data.rows(); }
  std::size_t channels() const { return data.cols(); }
  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

/// frames x classes, entries in {0,1}.
struct StrongLabelGrid {
  BinaryMatrix data;
  friend bool operator==(const StrongLabelGrid&, const StrongLabelGrid&) = default;
};

/// Clip-level class presence.
struct WeakLabel {
  std::vector<std::uint8_t> data;
  friend bool operator==(const WeakLabel&, const WeakLabel&) = default;
};

/// Recording conditions of a split. Strong clips are "synthetic" and the
/// other splits are "real"; the two differ in spectral placement and gain,
/// which gives the supervised baselines a domain gap to cross.
struct DomainConfig {
  double envelope_shift = 0.0;   // channels, fractional allowed
  double background_level = 0.3;
  double background_tilt = 0.0;  // linear slope of the background profile across channels
  double gain_min = 0.8;
  double gain_max = 1.2;
  double cell_noise = 0.15;
};

struct SceneConfig {
  std::size_t n_classes = 3;
  double clip_len = 5.0;  // seconds
  double fps = 24.0;
  std::size_t n_channels = 16;
  double min_duration = 1.5;  // seconds
  double max_duration = 4.0;
  std::uint64_t prototype_seed = 7;
  std::size_t max_polyphony = 2;
  double event_rate = 2.0;  // expected events per clip
  DomainConfig domain;

  std::size_t frames() const;
  void validate() const;
};

/// One synthesized clip together with its generating events.
struct Scene {
  FeatureGrid features;
  StrongLabelGrid labels;
  std::vector<EventInterval> events;
};

struct LabeledClip {
  std::string id;
  FeatureGrid features;
  StrongLabelGrid labels;
  std::vector<EventInterval> events;
};

struct WeakClip {
  std::string id;
  FeatureGrid features;
  WeakLabel label;
};

struct UnlabeledClip {
  std::string id;
  FeatureGrid features;
};

struct Dataset {
  std::size_t n_classes = 0;
  std::vector<LabeledClip> strong;
  std::vector<WeakClip> weak;
  std::vector<UnlabeledClip> unlabeled;
  std::vector<LabeledClip> validation;

  void validate() const;
};

/// Recipe for a whole dataset: per-split counts, the scene shared by all
/// splits and the two recording domains.
struct DataConfig {
  std::uint64_t seed = 1;
  std::size_t n_strong = 200;
  std::size_t n_weak = 120;
  std::size_t n_unlabeled = 1000;
  std::size_t n_validation = 100;
  SceneConfig scene;
  DomainConfig synthetic_domain;
  // Same background as the synthetic side: a background the model can tell
  // apart lets clip-level losses fire on whole real clips.
  DomainConfig real_domain{.envelope_shift = 2.0, .gain_min = 0.5, .gain_max = 1.1};
};

// Operations ---------------------------------------------------------------

/// Log-Mel features of a mono waveform; frames are centred on multiples of
/// the hop, Hann-windowed, and the output uses the natural logarithm.
FeatureGrid log_mel(std::span<const double> waveform, const PreprocConfig& cfg);

/// Triangular area-normalised mel filterbank, n_mel x (fft_len/2 + 1).
RealMatrix mel_filterbank(const PreprocConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

Scene synth_scene(std::uint64_t seed, const SceneConfig& cfg);

WeakLabel weaken(const StrongLabelGrid& y);

FeatureGrid add_noise_snr(const FeatureGrid& x, double snr_db, std::uint64_t seed);

/// Circular shift: out[t] = x[(t - delay) mod frames].
FeatureGrid frame_shift(const FeatureGrid& x, long delay);

/// Zero-mean Gaussian delay rounded to an integer (and then to a multiple of
/// `multiple_of` so that pooled labels can follow the shift exactly).
long sample_shift_delay(std::uint64_t seed, double sigma, std::size_t frames,
                        std::size_t multiple_of = 1);

FeatureGrid mixup(const FeatureGrid& x1, const FeatureGrid& x2, double lambda);

/// Rasterises events at `fps` onto a frames x n_classes grid.
StrongLabelGrid rasterize(const std::vector<EventInterval>& events, std::size_t frames,
                          std::size_t n_classes, double fps);

Dataset make_dataset(const DataConfig& cfg);

// On-disk format --------------------------------------------------------------

/// Writes <dir>/<split>/<id>.bin + <id>.json and <dir>/manifest.jsonl.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

void write_feature_file(const FeatureGrid& x, const std::filesystem::path& path);
FeatureGrid read_feature_file(const std::filesystem::path& path);

/// FNV-1a over every file listed in the manifest, in manifest order.
std::uint64_t dataset_hash(const std::filesystem::path& dir);

}  // namespace crst
