// SPDX-License-Identifier: Apache-2.0
//
// Frequency-domain feature enhancement with learnable Gaussian spectral masks.
// The spectrum of each feature plane is split into a low band and a high band
// by two Gaussian masks whose radii adapt to the spectrum's magnitude; the
// recombined bands are refined and fused back with the input.

#pragma once

#include <optional>
#include <string>
#include <utility>

#include "dimlight/layers.hpp"

namespace dimlight {

inline constexpr double kMaskEps = 1e-6;

struct G2afOptions {
  double lambda = 0.5;
  double r_low_init = 0.3;
  double r_high_init = 0.1;
  /// Uses 1 - exp(.) for the high mask instead of a second Gaussian low-pass.
  bool complementary_high_mask = false;
};

/// [1,1,H,W] radial distances: rows span linspace(-1,1,H), columns
/// linspace(-1,1,W). A single-sample axis sits at 0.
Tensor make_dist_grid(int h, int w);

/// r_eff = r * mean_{C,H,W} sigmoid(|spectrum|), per sample -> [N,1,1,1].
Tensor adaptive_radius(const ComplexTensor& spectrum, const Tensor& r);

/// exp(-d^2 / (2 r^2 + eps)) broadcast over samples: grid [1,1,H,W], r
/// [N,1,1,1] -> [N,1,H,W].
Tensor gaussian_mask(const Tensor& grid, const Tensor& r);

/// Masks the (center-shifted) spectrum and returns the real inverse transform.
Tensor masked_band(const ComplexTensor& spectrum, const Tensor& mask);

class G2af {
 public:
  G2af() = default;
  G2af(const Builder& b, const std::string& name, int channels, G2afOptions opts = {});

  struct Masks {
    Tensor low;
    Tensor high;
  };

  /// Masks used for input `x` (adaptive radii, or the override).
  [[nodiscard]] Masks masks(const ComplexTensor& spectrum, int h, int w) const;
  /// lambda * low band + (1 - lambda) * high band.
  [[nodiscard]] Tensor bands(const Tensor& x) const;
  /// fuse(cat(CBA(bands(x)), x)); output shape equals input shape.
  Tensor operator()(const Tensor& x) const;

  /// Replaces both adaptive radii with a constant (large values make the
  /// masks the identity). std::nullopt restores adaptive behaviour.
  void set_radius_override(std::optional<double> r) { radius_override_ = r; }

  [[nodiscard]] const Tensor& r_low() const { return r_low_; }
  [[nodiscard]] const Tensor& r_high() const { return r_high_; }
  [[nodiscard]] const G2afOptions& options() const { return opts_; }

 private:
  Tensor r_low_;
  Tensor r_high_;
  Conv2d cba_conv_;
  ChannelNorm cba_norm_;
  Linear fuse_;
  G2afOptions opts_;
  std::optional<double> radius_override_;
};

}  // namespace dimlight
