// SPDX-License-Identifier: Apache-2.0

#include "dimlight/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "dimlight/ops.hpp"
#include "dimlight/random.hpp"

namespace dimlight {

namespace {

constexpr double kDivEpsImage = 1e-6;

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

void check_extents(int w, int h) {
  if (w <= 0 || h <= 0) throw ImageError("image extents must be positive");
}

// Row-major 3x3 inverse via the adjugate.
std::array<double, 9> invert3(const std::array<double, 9>& m) {
  const double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7],
               i = m[8];
  const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  return {(e * i - f * h) / det, (c * h - b * i) / det, (b * f - c * e) / det,
          (f * g - d * i) / det, (a * i - c * g) / det, (c * d - a * f) / det,
          (d * h - e * g) / det, (b * g - a * h) / det, (a * e - b * d) / det};
}

// Rows: Y, Cr, Cb.
constexpr std::array<double, 9> kRgbToYcc = {0.299,   0.587,   0.114,  //
                                             0.5,     -0.4187, -0.0813,  //
                                             -0.1687, -0.3313, 0.5};

}  // namespace

// ---- files ----------------------------------------------------------------

Image load_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode " + path.string() + ": " + msg);
  }
  if ((img.format & PNG_FORMAT_FLAG_COLOR) == 0) {
    png_image_free(&img);
    throw ImageError(path.string() + ": grayscale PNG not supported");
  }
  if ((img.format & PNG_FORMAT_FLAG_LINEAR) != 0) {
    png_image_free(&img);
    throw ImageError(path.string() + ": 16-bit PNG not supported");
  }
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

void save_png(const Image& img, const std::filesystem::path& path) {
  check_extents(img.width, img.height);
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw ImageError("cannot write " + path.string() + ": " + msg);
  }
}

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P6") throw ImageError(path.string() + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw ImageError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255) throw ImageError(path.string() + ": only maxval 255 is supported");
  check_extents(w, h);
  Image out(w, h);
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(out.pixels.size())) {
    throw ImageError(path.string() + ": truncated PPM payload");
  }
  return out;
}

void save_ppm(const Image& img, const std::filesystem::path& path) {
  check_extents(img.width, img.height);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw ImageError("cannot write " + path.string());
}

Image load_image(const std::filesystem::path& path) {
  const std::string e = lower_ext(path);
  if (e == ".png") return load_png(path);
  if (e == ".ppm") return load_ppm(path);
  throw ImageError(path.string() + ": unsupported extension (use .png or .ppm)");
}

void save_image(const Image& img, const std::filesystem::path& path) {
  const std::string e = lower_ext(path);
  if (e == ".png") return save_png(img, path);
  if (e == ".ppm") return save_ppm(img, path);
  throw ImageError(path.string() + ": unsupported extension (use .png or .ppm)");
}

Image gray_heatmap(const Tensor& plane, int sample) {
  const Shape s = plane.shape();
  if (s.c != 1) throw DimensionError("gray_heatmap expects one channel, got " + s.str());
  Image out(s.w, s.h);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const std::uint8_t g = quantize(plane.at(sample, 0, y, x));
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = g;
    }
  return out;
}

// ---- tensors --------------------------------------------------------------

Tensor to_tensor(const Image& img) { return to_tensor(std::vector<Image>{img}); }

Tensor to_tensor(const std::vector<Image>& batch) {
  if (batch.empty()) throw DimensionError("to_tensor: empty batch");
  const int w = batch.front().width;
  const int h = batch.front().height;
  check_extents(w, h);
  const Shape s{static_cast<int>(batch.size()), 3, h, w};
  std::vector<double> v(s.numel());
  for (int n = 0; n < s.n; ++n) {
    const Image& img = batch[static_cast<std::size_t>(n)];
    if (img.width != w || img.height != h) throw DimensionError("to_tensor: batch extents differ");
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          v[((static_cast<std::size_t>(n) * 3 + ch) * h + y) * w + x] = img.at(x, y, ch) / 255.0;
  }
  return Tensor::from(s, std::move(v));
}

Image to_image(const Tensor& t, int n) {
  const Shape s = t.shape();
  if (s.c != 3) throw DimensionError("to_image expects 3 channels, got " + s.str());
  if (n < 0 || n >= s.n) throw DimensionError("to_image: sample index out of range");
  Image out(s.w, s.h);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) out.at(x, y, ch) = quantize(t.at(n, ch, y, x));
  return out;
}

// ---- colour ----------------------------------------------------------------

YcrcbImage rgb_to_ycrcb(const Tensor& rgb) {
  const Shape s = rgb.shape();
  if (s.c != 3) throw DimensionError("rgb_to_ycrcb expects 3 channels, got " + s.str());
  YcrcbImage out;
  for (double v : rgb.values()) {
    if (v < 0.0 || v > 1.0) ++out.clamped_inputs;
  }
  const Tensor x = out.clamped_inputs > 0 ? clamp(rgb, 0.0, 1.0) : rgb;
  const Tensor r = narrow(x, 1, 0, 1);
  const Tensor g = narrow(x, 1, 1, 1);
  const Tensor b = narrow(x, 1, 2, 1);
  auto row = [&](int k) { return r * kRgbToYcc[3 * k] + g * kRgbToYcc[3 * k + 1] + b * kRgbToYcc[3 * k + 2]; };
  out.y = clamp(row(0), 0.0, 1.0);
  out.cr = clamp(row(1) + 0.5, 0.0, 1.0);
  out.cb = clamp(row(2) + 0.5, 0.0, 1.0);
  return out;
}

Tensor ycrcb_to_rgb(const Tensor& y, const Tensor& cr, const Tensor& cb) {
  static const std::array<double, 9> inv = invert3(kRgbToYcc);
  const Tensor crc = cr - 0.5;
  const Tensor cbc = cb - 0.5;
  auto row = [&](int k) { return y * inv[3 * k] + crc * inv[3 * k + 1] + cbc * inv[3 * k + 2]; };
  return concat({row(0), row(1), row(2)}, 1);
}

Tensor luminance_diff_target(const Tensor& y_high, const Tensor& y_low) {
  if (y_high.shape() != y_low.shape()) {
    throw DimensionError("luminance_diff_target: " + y_high.shape().str() + " vs " + y_low.shape().str());
  }
  return clamp(div(y_high - y_low, y_high + kDivEpsImage), 0.0, 1.0);
}

// ---- synthesis / augmentation -------------------------------------------------

Image synth_lowlight(const Image& img, const LowLightParams& p, std::uint64_t seed) {
  if (!(p.gamma >= 1.0)) throw std::invalid_argument("synth_lowlight: gamma must be >= 1");
  if (!(p.scale > 0.0 && p.scale <= 1.0)) throw std::invalid_argument("synth_lowlight: scale must be in (0,1]");
  if (!(p.noise_sigma >= 0.0)) throw std::invalid_argument("synth_lowlight: noise_sigma must be >= 0");
  Rng rng(seed);
  Image out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    double v = p.scale * std::pow(img.pixels[i] / 255.0, p.gamma);
    if (p.noise_sigma > 0.0) v += p.noise_sigma * rng.normal();
    out.pixels[i] = quantize(v);
  }
  return out;
}

LowLightParams sample_lowlight_params(std::uint64_t seed) {
  Rng rng(mix_seed(seed, hash_name("lowlight-params")));
  LowLightParams p;
  p.gamma = rng.uniform(2.0, 4.0);
  p.scale = rng.uniform(0.15, 0.4);
  p.noise_sigma = rng.uniform(0.01, 0.04);
  return p;
}

Image make_scene(int width, int height, std::uint64_t seed) {
  check_extents(width, height);
  Rng rng(mix_seed(seed, hash_name("scene")));
  std::vector<double> f(static_cast<std::size_t>(width) * height * 3);
  auto px = [&](int x, int y, int ch) -> double& {
    return f[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  };
  // Two-colour linear gradient background.
  std::array<double, 3> c0{}, c1{};
  for (int ch = 0; ch < 3; ++ch) {
    c0[ch] = rng.uniform(0.35, 0.9);
    c1[ch] = rng.uniform(0.35, 0.9);
  }
  const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double dx = std::cos(ang), dy = std::sin(ang);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double u = 0.5 + 0.5 * (dx * (2.0 * x / std::max(1, width - 1) - 1.0) +
                                    dy * (2.0 * y / std::max(1, height - 1) - 1.0)) /
                                       std::sqrt(2.0);
      for (int ch = 0; ch < 3; ++ch) px(x, y, ch) = c0[ch] + (c1[ch] - c0[ch]) * u;
    }
  // Rectangles and discs.
  const int shapes = 3 + rng.uniform_int(4);
  for (int s = 0; s < shapes; ++s) {
    std::array<double, 3> col{};
    for (int ch = 0; ch < 3; ++ch) col[ch] = rng.uniform(0.1, 1.0);
    const double cx = rng.uniform(0.0, width);
    const double cy = rng.uniform(0.0, height);
    const double rx = rng.uniform(0.1, 0.35) * width;
    const double ry = rng.uniform(0.1, 0.35) * height;
    const bool disc = rng.uniform() < 0.5;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double ux = (x + 0.5 - cx) / rx;
        const double uy = (y + 0.5 - cy) / ry;
        const bool inside = disc ? ux * ux + uy * uy <= 1.0 : std::abs(ux) <= 1.0 && std::abs(uy) <= 1.0;
        if (inside)
          for (int ch = 0; ch < 3; ++ch) px(x, y, ch) = col[ch];
      }
  }
  // Sinusoidal texture.
  const double fx = rng.uniform(0.2, 0.9);
  const double fy = rng.uniform(0.2, 0.9);
  const double amp = rng.uniform(0.02, 0.06);
  Image out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double t = amp * std::sin(fx * x) * std::cos(fy * y);
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = quantize(px(x, y, ch) + t);
    }
  return out;
}

std::vector<ImagePair> make_synthetic_pairs(int count, int width, int height, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("pair count must be >= 0");
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i));
    ImagePair p;
    p.high = make_scene(width, height, s);
    p.low = synth_lowlight(p.high, sample_lowlight_params(s), mix_seed(s, 1));
    out.push_back(std::move(p));
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = img.at(img.width - 1 - x, y, ch);
  return out;
}

Image flip_vertical(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = img.at(x, img.height - 1 - y, ch);
  return out;
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > img.width || y0 + h > img.height) {
    throw std::invalid_argument("crop window outside the image");
  }
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = img.at(x0 + x, y0 + y, ch);
  return out;
}

ImagePair crop_flip_augment(const ImagePair& pair, const AugmentOptions& opts, std::uint64_t seed) {
  const Image& a = pair.low;
  const Image& b = pair.high;
  if (a.width != b.width || a.height != b.height) throw DimensionError("augment: pair extents differ");
  if (opts.crop < 0 || opts.crop > std::min(a.width, a.height)) {
    throw std::invalid_argument("augment: crop " + std::to_string(opts.crop) + " exceeds image extent");
  }
  Rng rng(seed);
  ImagePair out = pair;
  if (opts.crop > 0) {
    const int x0 = rng.uniform_int(a.width - opts.crop + 1);
    const int y0 = rng.uniform_int(a.height - opts.crop + 1);
    out.low = crop(a, x0, y0, opts.crop, opts.crop);
    out.high = crop(b, x0, y0, opts.crop, opts.crop);
  }
  if (opts.flips) {
    if (rng.uniform() < 0.5) {
      out.low = flip_horizontal(out.low);
      out.high = flip_horizontal(out.high);
    }
    if (rng.uniform() < 0.5) {
      out.low = flip_vertical(out.low);
      out.high = flip_vertical(out.high);
    }
  }
  return out;
}

}  // namespace dimlight
