// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <complex>
#include <memory>
#include <numbers>

#include "dimlight/ops.hpp"

namespace dimlight {

namespace {

using cplx = std::complex<double>;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place 1-D transform of `n` elements spaced by `stride`. Unnormalized;
// `inverse` flips the exponent sign.
void transform_1d(cplx* data, int n, std::size_t stride, bool inverse, std::vector<cplx>& scratch) {
  if (n == 1) return;
  scratch.resize(n);
  for (int i = 0; i < n; ++i) scratch[i] = data[i * stride];
  const double sign = inverse ? 1.0 : -1.0;
  if (is_pow2(n)) {
    for (int i = 1, j = 0; i < n; ++i) {
      int bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(scratch[i], scratch[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
      const double ang = sign * 2.0 * std::numbers::pi / len;
      for (int i = 0; i < n; i += len)
        for (int k = 0; k < len / 2; ++k) {
          const cplx wk(std::cos(ang * k), std::sin(ang * k));
          const cplx u = scratch[i + k];
          const cplx v = scratch[i + k + len / 2] * wk;
          scratch[i + k] = u + v;
          scratch[i + k + len / 2] = u - v;
        }
    }
    for (int i = 0; i < n; ++i) data[i * stride] = scratch[i];
    return;
  }
  // Direct DFT with twiddles indexed by (k * t) mod n.
  std::vector<cplx> tw(n);
  for (int m = 0; m < n; ++m) {
    const double ang = sign * 2.0 * std::numbers::pi * m / n;
    tw[m] = cplx(std::cos(ang), std::sin(ang));
  }
  for (int k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (int t = 0, m = 0; t < n; ++t, m = (m + k) % n) acc += scratch[t] * tw[m];
    data[k * stride] = acc;
  }
}

// Unnormalized 2-D transform of every H x W plane.
void transform_2d(std::vector<cplx>& a, int planes, int h, int w, bool inverse) {
  std::vector<cplx> scratch;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int p = 0; p < planes; ++p) {
    cplx* base = a.data() + p * plane;
    for (int r = 0; r < h; ++r) transform_1d(base + static_cast<std::size_t>(r) * w, w, 1, inverse, scratch);
    for (int c = 0; c < w; ++c) transform_1d(base + c, h, w, inverse, scratch);
  }
}

// Position of natural-order bin (u, v) after centering.
std::size_t shifted(int u, int v, int h, int w) {
  return static_cast<std::size_t>((u + h / 2) % h) * w + (v + w / 2) % w;
}

// Natural order -> centered order.
std::vector<cplx> center(const std::vector<cplx>& a, int planes, int h, int w) {
  std::vector<cplx> out(a.size());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int p = 0; p < planes; ++p)
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v)
        out[p * plane + shifted(u, v, h, w)] = a[p * plane + static_cast<std::size_t>(u) * w + v];
  return out;
}

// Centered order -> natural order.
std::vector<cplx> uncenter(const std::vector<cplx>& a, int planes, int h, int w) {
  std::vector<cplx> out(a.size());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int p = 0; p < planes; ++p)
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v)
        out[p * plane + static_cast<std::size_t>(u) * w + v] = a[p * plane + shifted(u, v, h, w)];
  return out;
}

}  // namespace

ComplexTensor fft2(const Tensor& x) {
  const Shape s = x.shape();
  const int planes = s.n * s.c;
  auto xv = x.values();
  std::vector<cplx> a(xv.begin(), xv.end());
  transform_2d(a, planes, s.h, s.w, false);
  a = center(a, planes, s.h, s.w);
  std::vector<double> re(a.size());
  std::vector<double> im(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    re[i] = a[i].real();
    im[i] = a[i].imag();
  }
  // d re_k / d x_n = cos, d im_k / d x_n = -sin: the adjoint of the forward
  // transform is the unnormalized inverse transform, real part kept.
  auto adjoint = [s, planes](std::span<const double> g, bool imag_part, std::vector<double>& gx) {
    std::vector<cplx> gc(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gc[i] = imag_part ? cplx(0.0, g[i]) : cplx(g[i], 0.0);
    gc = uncenter(gc, planes, s.h, s.w);
    transform_2d(gc, planes, s.h, s.w, true);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gc[i].real();
  };
  ComplexTensor out;
  out.re = make_result(
      s, std::move(re), {x},
      [adjoint](std::span<const double> g, GradSinks& sinks) {
        if (sinks[0]) adjoint(g, false, *sinks[0]);
      },
      "fft2_re");
  out.im = make_result(
      s, std::move(im), {x},
      [adjoint](std::span<const double> g, GradSinks& sinks) {
        if (sinks[0]) adjoint(g, true, *sinks[0]);
      },
      "fft2_im");
  return out;
}

Tensor ifft2(const ComplexTensor& z, double* max_imag) {
  const Shape s = z.re.shape();
  if (z.im.shape() != s) {
    throw DimensionError("complex tensor parts differ: " + s.str() + " vs " + z.im.shape().str());
  }
  const int planes = s.n * s.c;
  const double inv = 1.0 / (static_cast<double>(s.h) * s.w);
  auto rv = z.re.values();
  auto iv = z.im.values();
  std::vector<cplx> a(rv.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = cplx(rv[i], iv[i]);
  a = uncenter(a, planes, s.h, s.w);
  transform_2d(a, planes, s.h, s.w, true);
  std::vector<double> out(a.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = a[i].real() * inv;
    worst = std::max(worst, std::abs(a[i].imag() * inv));
  }
  if (max_imag) *max_imag = worst;
  return make_result(
      s, std::move(out), {z.re, z.im},
      [s, planes, inv](std::span<const double> g, GradSinks& sinks) {
        // (d/d re_k + i d/d im_k) = inv * forward transform of g.
        std::vector<cplx> gc(g.begin(), g.end());
        transform_2d(gc, planes, s.h, s.w, false);
        gc = center(gc, planes, s.h, s.w);
        for (std::size_t i = 0; i < gc.size(); ++i) {
          if (sinks[0]) (*sinks[0])[i] += gc[i].real() * inv;
          if (sinks[1]) (*sinks[1])[i] += gc[i].imag() * inv;
        }
      },
      "ifft2");
}

}  // namespace dimlight
