// SPDX-License-Identifier: Apache-2.0

#include "dimlight/uad.hpp"

#include <algorithm>
#include <cmath>

#include "dimlight/random.hpp"

namespace dimlight {

namespace {
constexpr double kProbFloor = 1e-12;

double norm_of(const Gradients& g, const std::string& prefix, const std::vector<std::string>& only) {
  double acc = 0.0;
  for (const auto& [name, t] : g) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    for (double v : t.values()) acc += v * v;
  }
  return std::sqrt(acc);
}
}  // namespace

Tensor entropy_map(const Tensor& f) {
  const int c = f.shape().c;
  if (c < 2) throw DimensionError("entropy_map needs at least 2 channels, got " + f.shape().str());
  const Tensor p = clamp(softmax(f, 1), kProbFloor, 2.0);
  const Tensor h = sum_axis(p * log(p), 1) * (-1.0 / std::log(static_cast<double>(c)));
  return clamp(h, 0.0, 1.0);
}

SpatialBranch::SpatialBranch(const Builder& b, const std::string& name, int channels)
    : conv1_(b, name + ".conv1", channels, channels),
      conv2_(b, name + ".conv2", channels, channels),
      rem_(b, name + ".rem", channels),
      merge_(b, name + ".merge", 2 * channels, channels) {}

Tensor SpatialBranch::weights(const Tensor& f) const { return softmax(conv2_(conv1_(avg_pool(f, 3))), 1); }

Tensor SpatialBranch::operator()(const Tensor& f) const {
  const Tensor attended = weights(f) * f;
  return leaky_relu(merge_(concat({attended, rem_(f)}, 1)));
}

Tensor to_tokens(const Tensor& x) {
  const Shape s = x.shape();
  return transpose(reshape(x, {s.n, 1, s.c, s.h * s.w}), 2, 3);
}

Tensor from_tokens(const Tensor& t, int h, int w) {
  const Shape s = t.shape();
  if (s.h != h * w) throw DimensionError("from_tokens: token count mismatch");
  return reshape(transpose(t, 2, 3), {s.n, s.w, h, w});
}

CrossAttention::CrossAttention(const Builder& b, const std::string& name, int q_channels,
                               int k_channels, int v_channels, int d_head)
    : q_(b, name + ".q", q_channels, d_head),
      k_(b, name + ".k", k_channels, d_head, false),
      v_(b, name + ".v", v_channels, d_head),
      d_head_(d_head) {}

Tensor CrossAttention::weights(const Tensor& q_src, const Tensor& k_src) const {
  if (q_src.shape().h * q_src.shape().w != k_src.shape().h * k_src.shape().w) {
    throw DimensionError("attention token count mismatch: " + q_src.shape().str() + " vs " +
                         k_src.shape().str());
  }
  const Tensor q = to_tokens(q_(q_src));
  const Tensor kt = transpose(to_tokens(k_(k_src)), 2, 3);
  return softmax(matmul(q, kt) * (1.0 / std::sqrt(static_cast<double>(d_head_))), 3);
}

Tensor CrossAttention::operator()(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src) const {
  if (v_src.shape().h * v_src.shape().w != k_src.shape().h * k_src.shape().w) {
    throw DimensionError("attention token count mismatch: " + v_src.shape().str() + " vs " +
                         k_src.shape().str());
  }
  const Tensor out = matmul(weights(q_src, k_src), to_tokens(v_(v_src)));
  return from_tokens(out, q_src.shape().h, q_src.shape().w);
}

Uad::Uad(const Builder& b, const std::string& name, int channels, UadOptions opts)
    : name_(name),
      g2af_(b, name + ".g2af", channels, opts.g2af),
      spatial_(b, name + ".spatial", channels),
      embed_(b, name + ".entropy_embed", 1, channels, false, opts.embed_init_gain),
      attn_(b, name + ".attn", channels, channels, channels, opts.d_head),
      gate_(b, name + ".gate", opts.d_head, channels),
      l2g_in_(b, name + ".l2g.in", opts.d_head, channels),
      l2g_out_(b, name + ".l2g.out", channels, channels),
      proj_(b, name + ".proj", 2 * channels, channels),
      merge_(b, name + ".merge", channels),
      opts_(opts) {
  if (opts.dropout < 0.0 || opts.dropout >= 1.0) throw std::invalid_argument("uad dropout must be in [0,1)");
}

std::vector<std::string> Uad::value_path_params() const { return {name_ + ".entropy_embed.weight"}; }

Tensor Uad::operator()(const Tensor& f_prev, const RunMode& mode, Trace* trace) const {
  const Tensor f_i = staged("uad.g2af", [&] { return g2af_(f_prev); });
  const Tensor ent = staged("uad.entropy", [&] { return entropy_map(f_i); });
  const Tensor f_spa = staged("uad.spatial", [&] { return spatial_(f_prev); });
  const Tensor f_u = staged("uad.attention", [&] { return attn_(f_spa, f_i, embed_(ent * entropy_scale_)); });
  const Tensor f_fre = staged("uad.frequency", [&] {
    const Tensor l2g = l2g_out_(silu(l2g_in_(f_u)));
    const std::uint64_t seed = mix_seed(mode.seed, hash_name(name_ + ".dropout"));
    return sigmoid(gate_(f_u)) * dropout(l2g, opts_.dropout, seed, mode.train);
  });
  if (trace) *trace = Trace{f_i, ent, f_spa, f_u, f_fre};
  return staged("uad.merge", [&] { return merge_(proj_(concat({f_prev + f_fre, f_i}, 1))); });
}

EntropyDiagnostic entropy_gradient_diagnostic(Uad& uad, const ParameterSet& params, const Tensor& x,
                                              const Tensor& target, double scale) {
  const double saved = uad.entropy_scale();
  const std::string prefix = uad.name() + ".";
  const auto value_path = uad.value_path_params();
  auto measure = [&](double s, double& all, double& value) {
    uad.set_entropy_scale(s);
    const Gradients g = backward(mean(square(uad(x) - target)), params);
    all = norm_of(g, prefix, {});
    value = norm_of(g, prefix, value_path);
  };
  EntropyDiagnostic d;
  d.scale = scale;
  try {
    measure(1.0, d.grad_norm_reference, d.value_norm_reference);
    measure(scale, d.grad_norm_scaled, d.value_norm_scaled);
  } catch (...) {
    uad.set_entropy_scale(saved);
    throw;
  }
  uad.set_entropy_scale(saved);
  return d;
}

}  // namespace dimlight
