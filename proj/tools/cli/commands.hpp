// SPDX-License-Identifier: Apache-2.0
//
// The `dimlight` command line: subcommand dispatch plus the gradient-check
// suite and ablation runner it exposes.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace dimlight::cli {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitIo = 2,
  kExitCheckpoint = 3,
  kExitDivergence = 4,
  kExitGradcheck = 5,
  kExitBadArgument = 6,
};

/// Runs one command line (without the program name). Reports go to `out`,
/// diagnostics to `err`; the return value is an ExitCode.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// ---- gradient checks ---------------------------------------------------------

struct ParamCheck {
  std::string module;
  std::string param;
  std::size_t probed = 0;
  double max_abs_grad = 0.0;
  double rel_error = 0.0;
  bool pass = false;
};

/// One row of the entropy-scale diagnostic on a UaD block.
struct EntropyScaleRow {
  double scale = 0.0;
  double value_norm = 0.0;   ///< value-path gradient norm at this scale
  double value_ratio = 0.0;  ///< relative to scale 1
  double grad_ratio = 0.0;   ///< all-parameter norm relative to scale 1
  bool pass = false;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  double tol = 1e-3;
  std::vector<ParamCheck> checks;
  std::vector<EntropyScaleRow> entropy;

  [[nodiscard]] bool passed() const;
  [[nodiscard]] std::string json() const;
  [[nodiscard]] std::string table() const;
};

/// Module names accepted by run_gradcheck besides "all".
const std::vector<std::string>& gradcheck_modules();

/// Checks every parameter of `module` (or all modules) against five-point
/// finite differences in 64-bit shadow precision. A parameter passes when its
/// relative error is <= tol and its gradient is not identically zero. The
/// uad module also runs the entropy-scale diagnostic at scales 0, 0.5, 1, 2:
/// scale 0 must give exactly zero value-path gradient, the others a
/// value-path norm proportional to the scale within 5%.
GradcheckReport run_gradcheck(const std::string& module, std::uint64_t seed, double tol);

// ---- ablations ---------------------------------------------------------------

/// Row names in canonical order.
const std::vector<std::string>& ablation_row_names();

/// Module switches for a row: "baseline" disables LEN, NeCo, UaD and AsC,
/// "len"/"neco"/"uad"/"asc" enable only that module, "full" enables all.
/// Throws ConfigError for an unknown name.
ModelConfig ablation_config(const ModelConfig& base, const std::string& row);

struct AblationRow {
  std::string name;
  ModelConfig model;
  std::size_t params = 0;
  EvalSummary initial;
  EvalSummary final;
  double last_train_loss = 0.0;
};

/// Trains one model per row from the same seed and data, then evaluates it.
/// `jobs` rows run concurrently; results do not depend on it.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<ImagePair>& train_set,
                                      const std::vector<ImagePair>& eval_set,
                                      const std::vector<std::string>& rows, int jobs = 1);

std::string ablation_json(const RunConfig& config, const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

/// Splits pairs into (train, eval): the last `holdout` pairs are held out;
/// with holdout 0 both sets are the full list.
std::pair<std::vector<ImagePair>, std::vector<ImagePair>> split_holdout(const std::vector<ImagePair>& pairs,
                                                                        int holdout);

}  // namespace dimlight::cli
