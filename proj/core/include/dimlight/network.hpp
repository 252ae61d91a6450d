// SPDX-License-Identifier: Apache-2.0
//
// U-shaped enhancement model: luminance prior -> stem -> NeCo encoder levels
// -> UaD bottleneck -> AsC decoder levels -> residual head. Plus checkpoint
// files, Adam, and the small-scale trainer.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dimlight/causal.hpp"
#include "dimlight/image.hpp"
#include "dimlight/len.hpp"
#include "dimlight/objective.hpp"
#include "dimlight/uad.hpp"

namespace dimlight {

struct ModelConfig {
  /// LEN projection width.
  int len_channels = 32;
  /// Width of the first backbone level.
  int base_channels = 16;
  int depth = 3;
  /// Per-level width multipliers; size must equal depth.
  std::vector<int> multipliers = {1, 2, 4};
  int d_head = 16;
  int asc_k = kAscNeighbors;
  int asc_patch = kAscPatch;
  double uad_dropout = 0.1;
  /// Start NeCo scans from the steady state of the first input (see
  /// linear_recurrence) instead of from zero.
  bool ssm_steady_start = false;
  /// Informational: set by the toy preset.
  bool toy = false;
  std::uint64_t seed = 0;

  /// Ablation switches. A disabled NeCo/UaD/AsC becomes a residual block of
  /// the same width; a disabled LEN passes the input through unchanged.
  bool use_len = true;
  bool use_neco = true;
  bool use_uad = true;
  bool use_asc = true;

  /// Reference-scale configuration (the defaults).
  static ModelConfig reference();
  /// Small configuration for desk-scale training: widths 8, depth 2.
  static ModelConfig toy_preset();

  /// Width of encoder/decoder level i, and of the bottleneck.
  [[nodiscard]] int level_channels(int i) const;
  [[nodiscard]] int bottleneck_channels() const { return level_channels(depth - 1); }
  /// Input extents must be multiples of this.
  [[nodiscard]] int size_multiple() const { return 1 << depth; }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// True when the two configs give the same parameters and forward pass
  /// (seed, dropout and the toy marker may differ).
  [[nodiscard]] bool same_architecture(const ModelConfig& other) const;

  bool operator==(const ModelConfig&) const = default;
};

/// JSON object with every field, keys in declaration order.
std::string model_config_to_json(const ModelConfig& c);
/// Parses a JSON object; missing keys keep their defaults, unknown keys throw
/// std::invalid_argument. The result is validated.
ModelConfig model_config_from_json(const std::string& text);

struct ModelOutput {
  Tensor image;  ///< [N,3,H,W] in [0,1]
  Tensor prior;  ///< [N,1,H,W], undefined without LEN
  Tensor entropy;  ///< bottleneck entropy [N,1,h,w], undefined without UaD
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  ~Model();
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  [[nodiscard]] ModelOutput run(const Tensor& i_low, const RunMode& mode = {}) const;
  Tensor operator()(const Tensor& i_low, const RunMode& mode = {}) const { return run(i_low, mode).image; }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] ParameterSet& params() { return *params_; }
  [[nodiscard]] const ParameterSet& params() const { return *params_; }
  [[nodiscard]] std::size_t param_count() const { return params_->scalar_count(); }

 private:
  struct Level;
  ModelConfig config_;
  std::unique_ptr<ParameterSet> params_;
  std::optional<LuminanceNet> len_;
  Conv2d stem_;
  std::vector<std::unique_ptr<Level>> levels_;
  std::optional<Uad> uad_;
  std::optional<ResBlock> bottleneck_rem_;
  Conv2d head_;
};

/// Reflect-pads the bottom/right edges up to the next multiple of `multiple`.
Tensor pad_to_multiple(const Tensor& x, int multiple);
/// Top-left h x w window.
Tensor crop_to(const Tensor& x, int h, int w);

/// Eval-mode run on any extent: pads to the size multiple, runs, and crops
/// the image and prior back. The entropy map stays at bottleneck resolution.
ModelOutput enhance(const Model& model, const Tensor& i_low);

// ---- checkpoints -------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'U', '2', 'C', 'W'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// "U2CW", version byte, u32 LE header length, JSON header {config, params:
/// [{name, shape, offset}], payload_floats}, then float32 LE values.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Loads into a fresh model built from the stored config.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);
/// Loads and requires the stored architecture to match `config`; rejected
/// before any value is copied.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

// ---- training ----------------------------------------------------------------

struct AdamOptions {
  double lr = 2.5e-4;
  double beta1 = 0.95;
  double beta2 = 0.99;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamOptions opts = {});

  /// One bias-corrected update of every parameter at learning rate `lr`.
  void step(const Gradients& grads, double lr);

  [[nodiscard]] long steps() const { return t_; }
  [[nodiscard]] const AdamOptions& options() const { return opts_; }
  [[nodiscard]] const std::vector<double>& first_moment(const std::string& name) const;
  [[nodiscard]] const std::vector<double>& second_moment(const std::string& name) const;

 private:
  const ParameterSet* params_;
  AdamOptions opts_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  [[nodiscard]] long step() const { return step_; }

 private:
  long step_;
};

struct TrainOptions {
  long steps = 200;
  AdamOptions adam;
  /// Fractions of `steps` at which the learning rate is multiplied by `lr_decay`.
  std::vector<double> milestones = {0.6, 0.85};
  double lr_decay = 0.5;
  AugmentOptions augment;
  ObjectiveOptions objective;
  std::uint64_t seed = 0;
};

/// Learning rate in effect at `step` (0-based).
double learning_rate(const TrainOptions& opts, long step);

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  std::size_t sample = 0;
  LossReport loss;
};

/// Per step: pick a pair, augment, forward in train mode, total loss,
/// backward, Adam update. Throws DivergenceError with the step index on a
/// non-finite loss or value. `on_step`, if set, sees every record as it is made.
std::vector<StepRecord> train(Model& model, const std::vector<ImagePair>& data, const TrainOptions& opts,
                              const std::function<void(const StepRecord&)>& on_step = {});

struct EvalSummary {
  LossReport loss;  ///< mean over pairs
  double psnr = 0.0;  ///< mean PSNR(output, high)
  double ssim = 0.0;  ///< mean SSIM(output, high)
  double input_psnr = 0.0;  ///< mean PSNR(low, high)
};

/// Eval-mode pass over every pair, no augmentation.
EvalSummary evaluate(const Model& model, const std::vector<ImagePair>& data, const ObjectiveOptions& objective = {});

}  // namespace dimlight
