// SPDX-License-Identifier: Apache-2.0
//
// Miniature CRNN: convolution blocks with gated linear units, a bidirectional
// GRU stage and a sigmoid head, with hand-written reverse-mode gradients,
// EMA teachers and Adam.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "crst/common.hpp"
#include "crst/seqdata.hpp"

namespace crst {

struct ConvBlockConfig {
  std::size_t out_channels = 16;
  std::size_t pool_time = 1;
  std::size_t pool_freq = 2;

  friend bool operator==(const ConvBlockConfig&, const ConvBlockConfig&) = default;
};

struct ModelConfig {
  std::size_t n_mel_in = 16;
  std::vector<ConvBlockConfig> conv_blocks{{16, 2, 2}, {32, 2, 2}, {64, 1, 4}};
  std::size_t recurrent_hidden = 32;
  std::size_t recurrent_layers = 1;
  std::size_t n_classes = 3;
  double dropout_rate = 0.5;
  /// Momentum of the running standardisation statistics.
  double norm_momentum = 0.1;

  void validate() const;
  std::size_t time_pool() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;
  bool trainable = true;

  std::size_t size() const;
};

/// Maps layer names onto a flat parameter vector; entries tile it exactly.
class Layout {
 public:
  void add(const std::string& name, std::vector<std::size_t> shape, bool trainable = true);
  const LayoutEntry& at(const std::string& name) const;
  const std::vector<LayoutEntry>& entries() const { return entries_; }
  std::size_t total() const { return total_; }
  std::string to_json() const;

  friend bool operator==(const Layout& a, const Layout& b) {
    return a.total_ == b.total_ && a.to_json() == b.to_json();
  }

 private:
  std::vector<LayoutEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

using ModelParams = std::vector<double>;

enum class Mode { Eval, Train };

struct BlockCache {
  std::size_t in_ch = 0, out_ch = 0, time = 0, freq = 0;
  std::vector<double> input;   // in_ch x time x freq
  std::vector<double> conv;    // pre-standardisation
  std::vector<double> normed;  // standardised + affine
  std::vector<double> lin;     // channel-mixing branch of the GLU
  std::vector<double> gate;    // sigmoid(normed)
  std::vector<double> mask;    // dropout multipliers (empty in eval)
};

struct GruDirCache {
  std::vector<double> h_prev, r, z, n, hn;  // time x hidden each
};

struct GruLayerCache {
  std::size_t in_dim = 0;
  std::vector<double> input;  // time x in_dim
  GruDirCache fwd, bwd;
  std::vector<double> output;  // time x 2H, before dropout
  std::vector<double> mask;
};

/// Activations kept by a train-mode forward for the backward pass.
struct ForwardCache {
  Mode mode = Mode::Train;
  std::size_t in_frames = 0;
  std::size_t out_frames = 0;
  std::vector<BlockCache> blocks;
  std::vector<GruLayerCache> gru;
  std::vector<double> head_in;  // time x 2H
  std::vector<double> logits;   // time x classes, unclamped
  PosteriorGrid output;
};

struct OptState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double lr_cap = 0.001;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  std::size_t param_count() const { return layout_.total(); }

  /// Glorot-uniform weights, zero biases, unit norm scales.
  ModelParams init_params(std::uint64_t seed) const;

  /// Eval-mode forward; deterministic and dropout-free.
  PosteriorGrid forward(const ModelParams& params, const FeatureGrid& x) const;

  /// Train-mode forward. Dropout masks are drawn from `dropout_seed` and kept
  /// in the cache so that backward is the exact gradient of this forward.
  PosteriorGrid forward_train(const ModelParams& params, const FeatureGrid& x,
                              std::uint64_t dropout_seed, ForwardCache& cache) const;

  /// Accumulates d(sum grad_out . output)/d(params) into `grad`.
  void backward(const ModelParams& params, const ForwardCache& cache,
                const RealMatrix& grad_out, std::span<double> grad) const;

  std::vector<double> backward(const ModelParams& params, const ForwardCache& cache,
                               const RealMatrix& grad_out) const;

  /// Moves the running standardisation buffers towards batch statistics.
  void update_running_stats(ModelParams& params,
                            std::span<const ForwardCache* const> caches) const;

  /// Output frame count for a given input frame count.
  std::size_t output_frames(std::size_t in_frames) const;

 private:
  PosteriorGrid run(const ModelParams& params, const FeatureGrid& x, Mode mode,
                    std::uint64_t dropout_seed, ForwardCache* cache) const;

  ModelConfig cfg_;
  Layout layout_;
};

/// Closed-form parameter count from a config (independent of Layout).
std::size_t expected_param_count(const ModelConfig& cfg);

// Gated linear unit over channels: out[c] = (W normed + b)[c] * sigmoid(normed[c]).
// `values` is channels x positions (position-major within channel).
std::vector<double> glu(std::span<const double> values, std::size_t channels,
                        std::span<const double> weight, std::span<const double> bias);

/// Per-class mean over frames.
std::vector<double> clip_pool(const PosteriorGrid& p);

/// Gradient of clip_pool: spreads a class-vector gradient uniformly over frames.
RealMatrix clip_pool_backward(std::span<const double> grad, std::size_t frames);

/// teacher' = decay * teacher + (1 - decay) * student.
ModelParams ema_update(const ModelParams& teacher, const ModelParams& student, double decay);

OptState make_opt_state(std::size_t n, double lr_cap = 0.001);

/// Bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8). Entries whose
/// layout flag is non-trainable are left untouched when `trainable` is given.
void adam_step(ModelParams& params, std::span<const double> grads, OptState& opt, double lr,
               const std::vector<std::uint8_t>* trainable = nullptr);

std::vector<std::uint8_t> trainable_mask(const Layout& layout);

}  // namespace crst
