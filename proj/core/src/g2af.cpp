// SPDX-License-Identifier: Apache-2.0

#include "dimlight/g2af.hpp"

#include <cmath>

namespace dimlight {

namespace {

double linspace_at(int i, int n) { return n == 1 ? 0.0 : -1.0 + 2.0 * i / (n - 1); }

// Keeps |z| differentiable at z = 0.
constexpr double kMagnitudeFloor = 1e-12;

}  // namespace

Tensor make_dist_grid(int h, int w) {
  if (h < 1 || w < 1) throw DimensionError("make_dist_grid: extents must be >= 1");
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = linspace_at(y, h);
      const double dy = linspace_at(x, w);
      v[static_cast<std::size_t>(y) * w + x] = std::sqrt(dx * dx + dy * dy);
    }
  return Tensor::from({1, 1, h, w}, std::move(v));
}

Tensor adaptive_radius(const ComplexTensor& spectrum, const Tensor& r) {
  const Tensor mag = sqrt(add_scalar(square(spectrum.re) + square(spectrum.im), kMagnitudeFloor));
  const Tensor m = mean_axis(mean_axis(mean_axis(sigmoid(mag), 1), 2), 3);
  return m * r;
}

Tensor gaussian_mask(const Tensor& grid, const Tensor& r) {
  const Tensor denom = add_scalar(scale(square(r), 2.0), kMaskEps);
  return exp(neg(square(grid) / denom));
}

Tensor masked_band(const ComplexTensor& spectrum, const Tensor& mask) {
  return ifft2(ComplexTensor{spectrum.re * mask, spectrum.im * mask});
}

G2af::G2af(const Builder& b, const std::string& name, int channels, G2afOptions opts)
    : cba_conv_(b, name + ".cba.conv", channels, channels, 3),
      cba_norm_(b, name + ".cba.norm", channels),
      fuse_(b, name + ".fuse", 2 * channels, channels),
      opts_(opts) {
  r_low_ = b.constant(name + ".r_low", {1, 1, 1, 1}, opts.r_low_init);
  r_high_ = b.constant(name + ".r_high", {1, 1, 1, 1}, opts.r_high_init);
}

G2af::Masks G2af::masks(const ComplexTensor& spectrum, int h, int w) const {
  const Tensor grid = make_dist_grid(h, w);
  Tensor rl;
  Tensor rh;
  if (radius_override_) {
    rl = rh = Tensor::full({spectrum.re.shape().n, 1, 1, 1}, *radius_override_);
  } else {
    rl = adaptive_radius(spectrum, r_low_);
    rh = adaptive_radius(spectrum, r_high_);
  }
  Masks m{gaussian_mask(grid, rl), gaussian_mask(grid, rh)};
  if (opts_.complementary_high_mask) m.high = add_scalar(neg(m.high), 1.0);
  return m;
}

Tensor G2af::bands(const Tensor& x) const {
  const Shape s = x.shape();
  const ComplexTensor spectrum = fft2(x);
  const Masks m = masks(spectrum, s.h, s.w);
  return masked_band(spectrum, m.low) * opts_.lambda +
         masked_band(spectrum, m.high) * (1.0 - opts_.lambda);
}

Tensor G2af::operator()(const Tensor& x) const {
  const Tensor band_sum = staged("g2af.bands", [&] { return bands(x); });
  return staged("g2af.fuse", [&] {
    const Tensor refined = silu(cba_norm_(cba_conv_(band_sum)));
    return fuse_(concat({refined, x}, 1));
  });
}

}  // namespace dimlight
