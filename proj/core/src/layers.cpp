// SPDX-License-Identifier: Apache-2.0

#include "dimlight/layers.hpp"

#include <cmath>

#include "dimlight/random.hpp"

namespace dimlight {

Tensor Builder::uniform(const std::string& name, Shape shape, double bound) const {
  Rng rng(mix_seed(seed, hash_name(name)));
  std::vector<double> v(shape.numel());
  for (double& x : v) x = rng.uniform(-bound, bound);
  return params.add(name, shape, std::move(v));
}

Tensor Builder::constant(const std::string& name, Shape shape, double value) const {
  return params.add(name, shape, std::vector<double>(shape.numel(), value));
}

Conv2d::Conv2d(const Builder& b, const std::string& name, int cin, int cout, int k, int stride,
               int groups, PadMode pad, bool bias)
    : Conv2d(b, name, cin, cout, k, k,
             ConvOptions{stride, k / 2, k / 2, groups, pad}, bias) {}

Conv2d::Conv2d(const Builder& b, const std::string& name, int cin, int cout, int kh, int kw,
               ConvOptions opts, bool bias)
    : opts_(opts) {
  if (cin % opts.groups != 0 || cout % opts.groups != 0) {
    throw DimensionError(name + ": channels not divisible by groups");
  }
  const int fan_in = cin / opts.groups * kh * kw;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  weight_ = b.uniform(name + ".weight", {cout, cin / opts.groups, kh, kw}, bound);
  if (bias) bias_ = b.uniform(name + ".bias", {1, cout, 1, 1}, bound);
}

Linear::Linear(const Builder& b, const std::string& name, int cin, int cout, bool bias,
               double init_gain) {
  const double bound = init_gain / std::sqrt(static_cast<double>(cin));
  weight_ = b.uniform(name + ".weight", {cout, cin, 1, 1}, bound);
  if (bias) bias_ = b.uniform(name + ".bias", {1, cout, 1, 1}, bound);
}

ChannelNorm::ChannelNorm(const Builder& b, const std::string& name, int channels, double eps)
    : eps_(eps) {
  gain_ = b.constant(name + ".gain", {1, channels, 1, 1}, 1.0);
  shift_ = b.constant(name + ".shift", {1, channels, 1, 1}, 0.0);
}

Tensor ChannelNorm::operator()(const Tensor& x) const {
  return channel_layer_norm(x, eps_) * gain_ + shift_;
}

Tensor channel_layer_norm(const Tensor& x, double eps) {
  const Tensor centered = x - mean_axis(x, 1);
  const Tensor var = mean_axis(square(centered), 1);
  return centered / sqrt(add_scalar(var, eps));
}

ResBlock::ResBlock(const Builder& b, const std::string& name, int channels)
    : conv1_(b, name + ".conv1", channels, channels, 3),
      conv2_(b, name + ".conv2", channels, channels, 3),
      channels_(channels) {}

Tensor ResBlock::operator()(const Tensor& x) const {
  if (x.shape().c != channels_) {
    throw DimensionError("ResBlock expects " + std::to_string(channels_) + " channels, got " +
                         x.shape().str());
  }
  return x + conv2_(relu(conv1_(x)));
}

}  // namespace dimlight
