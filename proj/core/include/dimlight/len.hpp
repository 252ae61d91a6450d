// SPDX-License-Identifier: Apache-2.0
//
// Luminance enhancement network: predicts the normalized Y-channel gap
// (Y_high - Y_low) / Y_high from the low-light input, and the rule that turns
// that prediction into a brightened RGB image.

#pragma once

#include <string>

#include "dimlight/layers.hpp"

namespace dimlight {

class LuminanceNet {
 public:
  LuminanceNet() = default;
  /// `channels` is the projection width (32 in the reference configuration).
  LuminanceNet(const Builder& b, const std::string& name, int channels);

  /// [N,3,H,W] -> prior [N,1,H,W] in (0,1).
  Tensor operator()(const Tensor& i_low) const;

  [[nodiscard]] int channels() const { return channels_; }

 private:
  Linear proj_;
  Conv2d depthwise_;
  ResBlock rem_[3];
  Conv2d head_;
  int channels_ = 0;
};

/// Mean squared error between prior and target over all pixels.
Tensor len_loss(const Tensor& prior, const Tensor& target);

/// Supervision target for the prior: luminance_diff_target of the Y planes.
Tensor len_target(const Tensor& i_low, const Tensor& i_high);

/// Y' = Y / (1 - min(prior, 0.99) + 1e-6) with Cr/Cb kept, back to RGB,
/// clamped to [0,1].
Tensor apply_luminance_prior(const Tensor& i_low, const Tensor& prior);

}  // namespace dimlight
