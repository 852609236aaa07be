// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `crst` tool. Kept in a library so the
// tests can drive the same code paths in-process.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "crst/config.hpp"
#include "crst/evalkit.hpp"
#include "crst/model.hpp"
#include "crst/postproc.hpp"
#include "crst/trainer.hpp"

namespace crst::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

/// Runs one command line (without the program name). Errors are reported on
/// `err` and mapped onto the exit codes above.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// FNV-1a of every regular file below `dir` except manifest.json, keyed by
/// the path relative to `dir`.
std::map<std::string, std::string> hash_outputs(const std::filesystem::path& dir);

/// Macro F over an alpha x beta grid of classwise parameters fitted on the
/// weak clips and applied to `eval`.
struct SweepTable {
  std::vector<double> alphas;
  std::vector<double> betas;
  RealMatrix macro_f;  // alphas x betas
  double global_f = 0.0;
};

SweepTable sweep_postproc(const Model& model, const ModelParams& params,
                          const std::vector<WeakClip>& weak,
                          const std::vector<LabeledClip>& eval, const PostprocSettings& s);

/// Event table of labeled clips' reference events.
EventTable reference_table(const std::vector<LabeledClip>& clips);

/// Global or classwise detections of the given clips.
EventTable detect(const Model& model, const std::vector<PosteriorGrid>& outputs,
                  const std::vector<std::string>& ids, double fps,
                  const ClasswiseParams* params);

}  // namespace crst::cli
