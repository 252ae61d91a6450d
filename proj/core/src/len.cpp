// SPDX-License-Identifier: Apache-2.0

#include "dimlight/len.hpp"

#include "dimlight/image.hpp"

namespace dimlight {

namespace {
constexpr double kPriorCap = 0.99;
constexpr double kPriorEps = 1e-6;
}  // namespace

LuminanceNet::LuminanceNet(const Builder& b, const std::string& name, int channels)
    : proj_(b, name + ".proj", 3, channels),
      depthwise_(b, name + ".depthwise", channels, channels, 3, 1, channels),
      rem_{ResBlock(b, name + ".rem0", channels), ResBlock(b, name + ".rem1", channels),
           ResBlock(b, name + ".rem2", channels)},
      head_(b, name + ".head", channels, 1, 3),
      channels_(channels) {}

Tensor LuminanceNet::operator()(const Tensor& i_low) const {
  if (i_low.shape().c != 3) throw DimensionError("LuminanceNet expects RGB input, got " + i_low.shape().str());
  Tensor f = staged("len layer 0 (proj)", [&] { return proj_(i_low); });
  f = staged("len layer 1 (depthwise)", [&] { return depthwise_(f); });
  for (int i = 0; i < 3; ++i) {
    f = staged("len layer " + std::to_string(2 + i) + " (rem)", [&] { return rem_[i](f); });
  }
  return staged("len layer 5 (head)", [&] { return sigmoid(head_(relu(f))); });
}

Tensor len_loss(const Tensor& prior, const Tensor& target) {
  if (prior.shape() != target.shape()) {
    throw DimensionError("len_loss: " + prior.shape().str() + " vs " + target.shape().str());
  }
  return mean(square(prior - target));
}

Tensor len_target(const Tensor& i_low, const Tensor& i_high) {
  NoGradGuard no_grad;
  return luminance_diff_target(rgb_to_ycrcb(i_high).y, rgb_to_ycrcb(i_low).y);
}

Tensor apply_luminance_prior(const Tensor& i_low, const Tensor& prior) {
  const YcrcbImage ycc = rgb_to_ycrcb(i_low);
  const Tensor gain = clamp(prior, 0.0, kPriorCap);
  const Tensor y = ycc.y / add_scalar(neg(gain), 1.0 + kPriorEps);
  return clamp(ycrcb_to_rgb(y, ycc.cr, ycc.cb), 0.0, 1.0);
}

}  // namespace dimlight
