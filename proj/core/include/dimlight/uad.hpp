// SPDX-License-Identifier: Apache-2.0
//
// Uncertainty-aware dual-domain block: a spatial branch and a frequency branch
// fused by cross-attention whose values come from the per-pixel channel
// entropy of the frequency-enhanced features.

#pragma once

#include <string>
#include <vector>

#include "dimlight/g2af.hpp"
#include "dimlight/layers.hpp"

namespace dimlight {

/// Normalized channel entropy per pixel, [N,C,H,W] -> [N,1,H,W] in [0,1].
/// Requires C >= 2.
Tensor entropy_map(const Tensor& f);

class SpatialBranch {
 public:
  SpatialBranch() = default;
  SpatialBranch(const Builder& b, const std::string& name, int channels);

  Tensor operator()(const Tensor& f) const;
  /// Per-pixel channel weights softmax(conv(conv(avg_pool(f)))).
  [[nodiscard]] Tensor weights(const Tensor& f) const;

 private:
  Linear conv1_;
  Linear conv2_;
  ResBlock rem_;
  Linear merge_;
};

/// Single-head scaled dot-product attention over pixels as tokens. The key
/// projection has no bias: softmax rows are invariant to it.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(const Builder& b, const std::string& name, int q_channels, int k_channels,
                 int v_channels, int d_head);

  /// -> [N, d_head, H, W].
  Tensor operator()(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src) const;
  /// Row-stochastic [N,1,HW,HW] weights for the given sources.
  [[nodiscard]] Tensor weights(const Tensor& q_src, const Tensor& k_src) const;

  [[nodiscard]] const Linear& value() const { return v_; }
  [[nodiscard]] int d_head() const { return d_head_; }

 private:
  Linear q_;
  Linear k_;
  Linear v_;
  int d_head_ = 0;
};

/// [N,C,H,W] -> [N,1,C,HW] with pixels along the last axis, transposed to tokens
/// [N,1,HW,C].
Tensor to_tokens(const Tensor& x);
/// Inverse of to_tokens.
Tensor from_tokens(const Tensor& t, int h, int w);

struct UadOptions {
  int d_head = 16;
  double dropout = 0.1;
  /// Bound of the entropy-embedding weights relative to Kaiming uniform.
  double embed_init_gain = 0.05;
  G2afOptions g2af;
};

class Uad {
 public:
  Uad() = default;
  Uad(const Builder& b, const std::string& name, int channels, UadOptions opts = {});

  /// Intermediates of one pass.
  struct Trace {
    Tensor f_i;
    Tensor entropy;
    Tensor f_spa;
    Tensor f_u;
    Tensor f_fre;
  };

  Tensor operator()(const Tensor& f_prev, const RunMode& mode = {}, Trace* trace = nullptr) const;

  /// Multiplies the entropy map before it is embedded as attention values.
  void set_entropy_scale(double s) { entropy_scale_ = s; }
  [[nodiscard]] double entropy_scale() const { return entropy_scale_; }

  /// Parameter names on the attention value path (the entropy embedding).
  [[nodiscard]] std::vector<std::string> value_path_params() const;
  [[nodiscard]] const std::string& name() const { return name_; }

  [[nodiscard]] G2af& g2af() { return g2af_; }
  [[nodiscard]] const CrossAttention& attention() const { return attn_; }
  [[nodiscard]] const SpatialBranch& spatial() const { return spatial_; }

 private:
  std::string name_;
  G2af g2af_;
  SpatialBranch spatial_;
  Linear embed_;
  CrossAttention attn_;
  Linear gate_;
  Linear l2g_in_;
  Linear l2g_out_;
  Linear proj_;
  ResBlock merge_;
  UadOptions opts_;
  double entropy_scale_ = 1.0;
};

struct EntropyDiagnostic {
  double scale = 1.0;
  /// Gradient norms over all block parameters.
  double grad_norm_reference = 0.0;
  double grad_norm_scaled = 0.0;
  /// Gradient norms over the value-path parameters only.
  double value_norm_reference = 0.0;
  double value_norm_scaled = 0.0;

  [[nodiscard]] double ratio() const { return grad_norm_scaled / grad_norm_reference; }
  [[nodiscard]] double value_ratio() const { return value_norm_scaled / value_norm_reference; }
};

/// Gradient norms of mean((uad(x) - target)^2) in eval mode with the entropy
/// map as produced and multiplied by `scale`. Restores the block's scale.
EntropyDiagnostic entropy_gradient_diagnostic(Uad& uad, const ParameterSet& params, const Tensor& x,
                                              const Tensor& target, double scale);

}  // namespace dimlight
