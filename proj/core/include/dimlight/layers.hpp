// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks shared by the network modules. Every layer
// registers its leaves in a ParameterSet under a dotted name and draws its
// initial values from a seed derived from (model seed, name), so the values
// of a layer do not depend on which other layers exist.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "dimlight/ops.hpp"
#include "dimlight/tensor.hpp"

namespace dimlight {

/// Train/eval switch plus the seed for stochastic layers in this pass.
struct RunMode {
  bool train = false;
  std::uint64_t seed = 0;
};

/// Seed source plus the parameter registry a module builds into.
struct Builder {
  ParameterSet& params;
  std::uint64_t seed = 0;

  /// Uniform(-bound, bound) values for `name`.
  Tensor uniform(const std::string& name, Shape shape, double bound) const;
  Tensor constant(const std::string& name, Shape shape, double value) const;
};

class Conv2d {
 public:
  Conv2d() = default;
  /// Square k x k kernel, "same" padding for stride 1.
  Conv2d(const Builder& b, const std::string& name, int cin, int cout, int k, int stride = 1,
         int groups = 1, PadMode pad = PadMode::kReflect, bool bias = true);
  /// Rectangular kernel with explicit padding.
  Conv2d(const Builder& b, const std::string& name, int cin, int cout, int kh, int kw,
         ConvOptions opts, bool bias = true);

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight_, bias_, opts_); }

  [[nodiscard]] const Tensor& weight() const { return weight_; }
  [[nodiscard]] const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  ConvOptions opts_;
};

/// Per-pixel channel mixing (1x1 convolution).
class Linear {
 public:
  Linear() = default;
  Linear(const Builder& b, const std::string& name, int cin, int cout, bool bias = true,
         double init_gain = 1.0);

  Tensor operator()(const Tensor& x) const { return linear(x, weight_, bias_); }

  [[nodiscard]] const Tensor& weight() const { return weight_; }
  [[nodiscard]] const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

/// LayerNorm over the channel axis at each pixel, with affine gain and shift.
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(const Builder& b, const std::string& name, int channels, double eps = 1e-5);

  Tensor operator()(const Tensor& x) const;

 private:
  Tensor gain_;
  Tensor shift_;
  double eps_ = 1e-5;
};

/// Stateless channel LayerNorm (no affine part).
Tensor channel_layer_norm(const Tensor& x, double eps = 1e-5);

/// Residual block: x + conv3x3(relu(conv3x3(x))), width preserved.
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const Builder& b, const std::string& name, int channels);

  Tensor operator()(const Tensor& x) const;

  [[nodiscard]] const Conv2d& first() const { return conv1_; }
  [[nodiscard]] const Conv2d& second() const { return conv2_; }

 private:
  Conv2d conv1_;
  Conv2d conv2_;
  int channels_ = 0;
};

/// Runs `f`, prefixing any non-finite fault with `stage`.
template <class F>
Tensor staged(std::string_view stage, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(stage) + ": " + e.what());
  }
}

}  // namespace dimlight
