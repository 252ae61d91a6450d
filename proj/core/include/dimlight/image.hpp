// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB images, colour conversion, luminance targets and synthetic
// low-light pair generation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dimlight/tensor.hpp"

namespace dimlight {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  [[nodiscard]] std::uint8_t& at(int x, int y, int ch) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  [[nodiscard]] std::uint8_t at(int x, int y, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  bool operator==(const Image&) const = default;
};

struct ImagePair {
  Image low;
  Image high;
};

/// Y, Cr, Cb planes, each [N,1,H,W] in [0,1].
struct YcrcbImage {
  Tensor y;
  Tensor cr;
  Tensor cb;
  /// Input values that were outside [0,1] and got clamped.
  std::size_t clamped_inputs = 0;
};

// ---- files ----------------------------------------------------------------

/// 8-bit RGB(A) PNG; alpha is dropped. Grayscale and 16-bit files are rejected.
Image load_png(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);
/// Binary P6 with maxval 255.
Image load_ppm(const std::filesystem::path& path);
void save_ppm(const Image& img, const std::filesystem::path& path);
/// Dispatches on the extension (.png, .ppm).
Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

/// Single-channel plane in [0,1] mapped linearly to 0..255 gray.
Image gray_heatmap(const Tensor& plane, int sample = 0);

// ---- tensors --------------------------------------------------------------

/// [1,3,H,W] in [0,1].
Tensor to_tensor(const Image& img);
/// [N,3,H,W]; all images must share extents.
Tensor to_tensor(const std::vector<Image>& batch);
/// Rounds clamp(v,0,1)*255 for sample `n` of a [N,3,H,W] tensor.
Image to_image(const Tensor& t, int n = 0);

// ---- colour ----------------------------------------------------------------

/// Full-range BT.601: Y = .299R + .587G + .114B, Cr/Cb offset by 0.5.
YcrcbImage rgb_to_ycrcb(const Tensor& rgb);
/// Inverse of rgb_to_ycrcb (before clamping) -> [N,3,H,W].
Tensor ycrcb_to_rgb(const Tensor& y, const Tensor& cr, const Tensor& cb);

/// clamp((y_high - y_low) / (y_high + 1e-6), 0, 1).
Tensor luminance_diff_target(const Tensor& y_high, const Tensor& y_low);

// ---- synthesis / augmentation -------------------------------------------------

struct LowLightParams {
  double gamma = 2.5;
  double scale = 0.25;
  double noise_sigma = 0.02;
};

/// clamp(scale * v^gamma + N(0, sigma^2)) quantized to 8 bits.
Image synth_lowlight(const Image& img, const LowLightParams& p, std::uint64_t seed);

/// Draws gamma, scale and sigma from the default synthetic regime.
LowLightParams sample_lowlight_params(std::uint64_t seed);

/// Procedural well-exposed scene (gradients, shapes and texture).
Image make_scene(int width, int height, std::uint64_t seed);

/// `count` scenes of the given size, each darkened with sampled parameters.
/// Pair i uses scene seed mix_seed(seed, i).
std::vector<ImagePair> make_synthetic_pairs(int count, int width, int height, std::uint64_t seed);

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
Image crop(const Image& img, int x0, int y0, int w, int h);

struct AugmentOptions {
  int crop = 0;  // 0 keeps the full image
  bool flips = true;
};

/// Same random crop and flips applied to both images of the pair.
ImagePair crop_flip_augment(const ImagePair& pair, const AugmentOptions& opts, std::uint64_t seed);

}  // namespace dimlight
