// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented experiment configuration:
//
//   # comment
//   [train]
//   variant = crst
//   epochs = 30
//
// Unknown sections or keys are rejected so that typos cannot silently fall
// back to defaults.

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "crst/seqdata.hpp"
#include "crst/trainer.hpp"

namespace crst {

using IniSection = std::map<std::string, std::string>;
using IniFile = std::map<std::string, IniSection>;

/// Throws ConfigError with the offending line number.
IniFile parse_ini(const std::string& text);

struct PostprocSettings {
  double alpha_min = 0.0002;
  double alpha_max = 0.1;
  std::size_t alpha_steps = 10;
  double beta_min = 5.0;
  double beta_max = 100.0;
  std::size_t beta_steps = 20;
  double alpha = 0.0064;  // used by `postproc --mode classwise` without --alpha
  double beta = 25.0;
};

struct ExperimentConfig {
  DataConfig data;
  TrainConfig train;
  PostprocSettings postproc;

  /// Canonical text form; parsing it yields the same config.
  std::string to_ini() const;
};

/// Defaults overridden by the given file contents.
ExperimentConfig config_from_ini(const IniFile& ini);
ExperimentConfig load_config(const std::filesystem::path& path);

/// "4x2x4, 8x1x4" -> blocks (channels x time pool x frequency pool).
std::vector<ConvBlockConfig> parse_blocks(const std::string& text);

}  // namespace crst
