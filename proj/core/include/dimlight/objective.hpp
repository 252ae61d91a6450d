// SPDX-License-Identifier: Apache-2.0
//
// Training loss terms, their weighted sum, and reference metrics. Images are
// [N,3,H,W] in [0,1].

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dimlight/layers.hpp"

namespace dimlight {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr double kPsnrCap = 100.0;

Tensor loss_mse(const Tensor& pred, const Tensor& gt);

/// Per-window SSIM map with an 11x11 Gaussian window (sigma 1.5), no padding:
/// [N,C,H-10,W-10]. Rejects images smaller than the window.
Tensor ssim_map(const Tensor& a, const Tensor& b);
/// 1 - mean SSIM.
Tensor loss_ssim(const Tensor& pred, const Tensor& gt);

/// Frozen, seed-initialized convolution stack used as a perceptual feature
/// space. Its weights are not trainable and do not depend on any model.
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eed;

  explicit FeatureExtractor(std::uint64_t seed = kDefaultSeed);

  /// Activations after each of the three layers.
  [[nodiscard]] std::vector<Tensor> features(const Tensor& x) const;
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
    int stride;
  };
  std::uint64_t seed_;
  std::vector<Layer> layers_;
};

/// Mean over layers of the mean absolute feature difference.
Tensor loss_perceptual(const Tensor& pred, const Tensor& gt, const FeatureExtractor& extractor);

/// Per-(image, channel) soft histogram: Gaussian kernels of bandwidth 1/bins
/// centered on the bins of [0,1], averaged over pixels, then softmax over
/// bins. [N,C,H,W] -> [N,C,bins,1].
Tensor soft_histogram(const Tensor& x, int bins);

/// sum_b p log(p / q) along `axis`, then the mean over the remaining entries.
/// p and q must be strictly positive.
Tensor kl_divergence(const Tensor& p, const Tensor& q, int axis);

enum class KlDirection { kGtPred, kPredGt };

/// KL between the soft histograms, averaged over images and channels.
Tensor loss_global(const Tensor& pred, const Tensor& gt, int bins = 32,
                   KlDirection dir = KlDirection::kGtPred);

/// Mean over pixels of 1 - (p.g + eps) / (sqrt(|p|^2 + eps) sqrt(|g|^2 + eps)),
/// with the vectors taken across channels. Black pixels compare equal to
/// black pixels.
Tensor loss_color(const Tensor& pred, const Tensor& gt);

/// Mean |d pred - d gt| of forward differences along W plus the same along H.
Tensor loss_grad(const Tensor& pred, const Tensor& gt);

/// Term order: mse, ssim, per, global, color, grad, len.
inline constexpr std::array<const char*, 7> kLossTermNames = {"mse", "ssim", "per", "global",
                                                             "color", "grad", "len"};

struct LossWeights {
  std::array<double, 7> w = {0.95, 0.01, 0.01, 0.1, 0.5, 0.1, 0.1};

  /// Throws std::invalid_argument on a negative or non-finite weight.
  void validate() const;
};

struct LossReport {
  std::array<double, 7> terms{};
  double total = 0.0;

  [[nodiscard]] double term(const std::string& name) const;
};

struct LossTerms {
  std::array<Tensor, 7> terms;
  Tensor total;

  [[nodiscard]] LossReport report() const;
};

struct ObjectiveOptions {
  LossWeights weights;
  int hist_bins = 32;
  KlDirection kl = KlDirection::kGtPred;
  std::uint64_t extractor_seed = FeatureExtractor::kDefaultSeed;
};

class Objective {
 public:
  explicit Objective(ObjectiveOptions opts = {});

  /// All seven terms and their weighted sum. `len_prior` and `len_target`
  /// are the luminance prior and its target ([N,1,H,W]).
  [[nodiscard]] LossTerms operator()(const Tensor& pred, const Tensor& gt, const Tensor& len_prior,
                                     const Tensor& len_target) const;

  [[nodiscard]] const ObjectiveOptions& options() const { return opts_; }
  [[nodiscard]] const FeatureExtractor& extractor() const { return extractor_; }

 private:
  ObjectiveOptions opts_;
  FeatureExtractor extractor_;
};

/// 10 log10(1 / MSE), reported as 100 dB when MSE < 1e-10.
double psnr(const Tensor& pred, const Tensor& gt);
/// Mean SSIM.
double ssim_metric(const Tensor& pred, const Tensor& gt);

}  // namespace dimlight
