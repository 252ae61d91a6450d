// SPDX-License-Identifier: Apache-2.0

#include <memory>

#include "dimlight/ops.hpp"

namespace dimlight {

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// For each (output position, kernel tap) the source coordinate, or -1 when the
// tap lands in zero padding.
std::vector<int> tap_sources(int out_extent, int k, int in_extent, int stride, int pad,
                             PadMode mode) {
  std::vector<int> src(static_cast<std::size_t>(out_extent) * k);
  for (int o = 0; o < out_extent; ++o)
    for (int t = 0; t < k; ++t) {
      const int i = o * stride + t - pad;
      int s = -1;
      if (i >= 0 && i < in_extent) {
        s = i;
      } else if (mode == PadMode::kReflect) {
        s = reflect(i, in_extent);
      }
      src[static_cast<std::size_t>(o) * k + t] = s;
    }
  return src;
}

struct ConvGeometry {
  Shape in;
  Shape out;
  int kh = 0;
  int kw = 0;
  int groups = 1;
  int cin_g = 0;
  int cout_g = 0;
  std::vector<int> rows;
  std::vector<int> cols;

  [[nodiscard]] std::size_t wi(int oc, int icl, int ky, int kx) const {
    return ((static_cast<std::size_t>(oc) * cin_g + icl) * kh + ky) * kw + kx;
  }
};

// Calls f(out_index, in_index, weight_index) for every multiply-accumulate, in
// a fixed order.
template <class F>
void for_each_tap(const ConvGeometry& g, F&& f) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in.h) * g.in.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out.h) * g.out.w;
  for (int n = 0; n < g.in.n; ++n)
    for (int oc = 0; oc < g.out.c; ++oc) {
      const int grp = oc / g.cout_g;
      const std::size_t obase = (static_cast<std::size_t>(n) * g.out.c + oc) * out_plane;
      for (int icl = 0; icl < g.cin_g; ++icl) {
        const int ic = grp * g.cin_g + icl;
        const std::size_t ibase = (static_cast<std::size_t>(n) * g.in.c + ic) * in_plane;
        for (int ky = 0; ky < g.kh; ++ky)
          for (int kx = 0; kx < g.kw; ++kx) {
            const std::size_t widx = g.wi(oc, icl, ky, kx);
            for (int oy = 0; oy < g.out.h; ++oy) {
              const int r = g.rows[static_cast<std::size_t>(oy) * g.kh + ky];
              if (r < 0) continue;
              for (int ox = 0; ox < g.out.w; ++ox) {
                const int c = g.cols[static_cast<std::size_t>(ox) * g.kw + kx];
                if (c < 0) continue;
                f(obase + static_cast<std::size_t>(oy) * g.out.w + ox,
                  ibase + static_cast<std::size_t>(r) * g.in.w + c, widx);
              }
            }
          }
      }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvOptions& opts) {
  auto geo = std::make_shared<ConvGeometry>();
  geo->in = x.shape();
  const Shape ws = w.shape();
  if (opts.groups < 1 || opts.stride < 1 || opts.pad_h < 0 || opts.pad_w < 0) {
    throw DimensionError("invalid convolution options");
  }
  if (geo->in.c % opts.groups != 0 || ws.n % opts.groups != 0 ||
      ws.c * opts.groups != geo->in.c) {
    throw DimensionError("conv2d weight " + ws.str() + " incompatible with input " +
                         geo->in.str() + " and groups=" + std::to_string(opts.groups));
  }
  if (b.defined() && b.shape() != Shape{1, ws.n, 1, 1}) {
    throw DimensionError("conv2d bias " + b.shape().str() + " does not match " +
                         std::to_string(ws.n) + " outputs");
  }
  geo->kh = ws.h;
  geo->kw = ws.w;
  geo->groups = opts.groups;
  geo->cin_g = ws.c;
  geo->cout_g = ws.n / opts.groups;
  const int oh = (geo->in.h + 2 * opts.pad_h - ws.h) / opts.stride + 1;
  const int ow = (geo->in.w + 2 * opts.pad_w - ws.w) / opts.stride + 1;
  if (oh < 1 || ow < 1 || geo->in.h + 2 * opts.pad_h < ws.h || geo->in.w + 2 * opts.pad_w < ws.w) {
    throw DimensionError("conv2d kernel larger than padded input " + geo->in.str());
  }
  geo->out = {geo->in.n, ws.n, oh, ow};
  geo->rows = tap_sources(oh, ws.h, geo->in.h, opts.stride, opts.pad_h, opts.pad_mode);
  geo->cols = tap_sources(ow, ws.w, geo->in.w, opts.stride, opts.pad_w, opts.pad_mode);

  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> out(geo->out.numel(), 0.0);
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  if (b.defined()) {
    auto bv = b.values();
    for (int n = 0; n < geo->out.n; ++n)
      for (int oc = 0; oc < geo->out.c; ++oc)
        std::fill_n(out.begin() + (static_cast<std::size_t>(n) * geo->out.c + oc) * out_plane,
                    out_plane, bv[oc]);
  }
  for_each_tap(*geo, [&](std::size_t o, std::size_t i, std::size_t wi) { out[o] += wv[wi] * xv[i]; });

  return make_result(
      geo->out, std::move(out), {x, w, b},
      [x, w, geo, out_plane](std::span<const double> g, GradSinks& sinks) {
        auto xv = x.values();
        auto wv = w.values();
        if (sinks[0]) {
          auto& gx = *sinks[0];
          for_each_tap(*geo, [&](std::size_t o, std::size_t i, std::size_t wi) { gx[i] += wv[wi] * g[o]; });
        }
        if (sinks[1]) {
          auto& gw = *sinks[1];
          for_each_tap(*geo, [&](std::size_t o, std::size_t i, std::size_t wi) { gw[wi] += xv[i] * g[o]; });
        }
        if (sinks[2]) {
          auto& gb = *sinks[2];
          for (int n = 0; n < geo->out.n; ++n)
            for (int oc = 0; oc < geo->out.c; ++oc) {
              const std::size_t base = (static_cast<std::size_t>(n) * geo->out.c + oc) * out_plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += g[base + i];
              gb[oc] += acc;
            }
        }
      },
      "conv2d");
}

}  // namespace dimlight
