// SPDX-License-Identifier: Apache-2.0

#include "dimlight/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "dimlight/len.hpp"

namespace dimlight {

namespace {

constexpr double kCosEps = 1e-8;

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

Tensor gaussian_window(int channels) {
  std::array<double, kSsimWindow> g{};
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += g[static_cast<std::size_t>(i)];
  }
  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(channels) * kSsimWindow * kSsimWindow);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < kSsimWindow; ++y)
      for (int x = 0; x < kSsimWindow; ++x)
        w.push_back(g[static_cast<std::size_t>(y)] * g[static_cast<std::size_t>(x)] / (total * total));
  return Tensor::from({channels, 1, kSsimWindow, kSsimWindow}, std::move(w));
}

Tensor forward_diff(const Tensor& x, int axis) {
  const int n = x.shape()[axis];
  return narrow(x, axis, 1, n - 1) - narrow(x, axis, 0, n - 1);
}

}  // namespace

Tensor loss_mse(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_mse");
  return mean(square(pred - gt));
}

Tensor ssim_map(const Tensor& a, const Tensor& b) {
  require_same(a, b, "ssim");
  const Shape s = a.shape();
  if (s.h < kSsimWindow || s.w < kSsimWindow) {
    throw DimensionError("ssim needs at least 11x11 pixels, got " + s.str());
  }
  const Tensor win = gaussian_window(s.c);
  const ConvOptions opts{1, 0, 0, s.c, PadMode::kZeros};
  auto blur = [&](const Tensor& x) { return conv2d(x, win, Tensor{}, opts); };
  const Tensor mu_a = blur(a);
  const Tensor mu_b = blur(b);
  const Tensor mu_ab = mu_a * mu_b;
  const Tensor var_a = blur(square(a)) - square(mu_a);
  const Tensor var_b = blur(square(b)) - square(mu_b);
  const Tensor cov = blur(a * b) - mu_ab;
  const Tensor num = add_scalar(mu_ab * 2.0, kSsimC1) * add_scalar(cov * 2.0, kSsimC2);
  const Tensor den = add_scalar(square(mu_a) + square(mu_b), kSsimC1) * add_scalar(var_a + var_b, kSsimC2);
  return num / den;
}

Tensor loss_ssim(const Tensor& pred, const Tensor& gt) { return add_scalar(neg(mean(ssim_map(pred, gt))), 1.0); }

FeatureExtractor::FeatureExtractor(std::uint64_t seed) : seed_(seed) {
  ParameterSet scratch;
  const Builder b{scratch, seed};
  const int widths[4] = {3, 8, 16, 16};
  const int strides[3] = {1, 2, 1};
  for (int i = 0; i < 3; ++i) {
    const Conv2d conv(b, "extractor." + std::to_string(i), widths[i], widths[i + 1], 3, strides[i]);
    layers_.push_back(Layer{conv.weight().detach(), conv.bias().detach(), strides[i]});
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (const Layer& l : layers_) {
    h = relu(conv2d(h, l.weight, l.bias, ConvOptions{l.stride, 1, 1, 1, PadMode::kReflect}));
    out.push_back(h);
  }
  return out;
}

Tensor loss_perceptual(const Tensor& pred, const Tensor& gt, const FeatureExtractor& extractor) {
  require_same(pred, gt, "loss_perceptual");
  const auto fp = extractor.features(pred);
  const auto fg = extractor.features(gt);
  Tensor acc = mean(abs(fp[0] - fg[0]));
  for (std::size_t i = 1; i < fp.size(); ++i) acc = acc + mean(abs(fp[i] - fg[i]));
  return acc * (1.0 / static_cast<double>(fp.size()));
}

Tensor soft_histogram(const Tensor& x, int bins) {
  if (bins < 2) throw std::invalid_argument("soft_histogram needs at least 2 bins");
  const Shape s = x.shape();
  std::vector<double> centers(static_cast<std::size_t>(bins));
  for (int i = 0; i < bins; ++i) centers[static_cast<std::size_t>(i)] = (i + 0.5) / bins;
  const double bandwidth = 1.0 / bins;
  const Tensor flat = reshape(x, {s.n, s.c, 1, s.h * s.w});
  const Tensor d = flat - Tensor::from({1, 1, bins, 1}, std::move(centers));
  const Tensor k = exp(square(d) * (-1.0 / (2.0 * bandwidth * bandwidth)));
  return softmax(mean_axis(k, 3), 2);
}

Tensor kl_divergence(const Tensor& p, const Tensor& q, int axis) {
  require_same(p, q, "kl_divergence");
  return mean(sum_axis(p * (log(p) - log(q)), axis));
}

Tensor loss_global(const Tensor& pred, const Tensor& gt, int bins, KlDirection dir) {
  require_same(pred, gt, "loss_global");
  const Tensor hp = soft_histogram(pred, bins);
  const Tensor hg = soft_histogram(gt, bins);
  return dir == KlDirection::kGtPred ? kl_divergence(hg, hp, 2) : kl_divergence(hp, hg, 2);
}

Tensor loss_color(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_color");
  const Tensor dot = add_scalar(sum_axis(pred * gt, 1), kCosEps);
  const Tensor np = sqrt(add_scalar(sum_axis(square(pred), 1), kCosEps));
  const Tensor ng = sqrt(add_scalar(sum_axis(square(gt), 1), kCosEps));
  // Rounding can push the ratio a few ulps past 1.
  return add_scalar(neg(mean(clamp(dot / (np * ng), -1.0, 1.0))), 1.0);
}

Tensor loss_grad(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "loss_grad");
  const Shape s = pred.shape();
  if (s.h < 2 || s.w < 2) throw DimensionError("loss_grad needs at least 2x2 pixels");
  return mean(abs(forward_diff(pred, 3) - forward_diff(gt, 3))) +
         mean(abs(forward_diff(pred, 2) - forward_diff(gt, 2)));
}

void LossWeights::validate() const {
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i]) || w[i] < 0.0) {
      throw std::invalid_argument(std::string("loss weight '") + kLossTermNames[i] + "' must be finite and >= 0");
    }
  }
}

double LossReport::term(const std::string& name) const {
  for (std::size_t i = 0; i < kLossTermNames.size(); ++i)
    if (name == kLossTermNames[i]) return terms[i];
  throw std::out_of_range("unknown loss term: " + name);
}

LossReport LossTerms::report() const {
  LossReport r;
  for (std::size_t i = 0; i < terms.size(); ++i) r.terms[i] = terms[i].item();
  r.total = total.item();
  return r;
}

Objective::Objective(ObjectiveOptions opts) : opts_(opts), extractor_(opts.extractor_seed) {
  opts_.weights.validate();
  if (opts_.hist_bins < 2) throw std::invalid_argument("hist_bins must be >= 2");
}

LossTerms Objective::operator()(const Tensor& pred, const Tensor& gt, const Tensor& len_prior,
                                const Tensor& len_target) const {
  LossTerms t;
  t.terms[0] = loss_mse(pred, gt);
  t.terms[1] = loss_ssim(pred, gt);
  t.terms[2] = loss_perceptual(pred, gt, extractor_);
  t.terms[3] = loss_global(pred, gt, opts_.hist_bins, opts_.kl);
  t.terms[4] = loss_color(pred, gt);
  t.terms[5] = loss_grad(pred, gt);
  t.terms[6] = len_loss(len_prior, len_target);
  t.total = t.terms[0] * opts_.weights.w[0];
  for (std::size_t i = 1; i < t.terms.size(); ++i) t.total = t.total + t.terms[i] * opts_.weights.w[i];
  return t;
}

double psnr(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "psnr");
  auto a = pred.values();
  auto b = gt.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = acc / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim_metric(const Tensor& pred, const Tensor& gt) {
  NoGradGuard no_grad;
  return mean(ssim_map(pred, gt)).item();
}

}  // namespace dimlight
