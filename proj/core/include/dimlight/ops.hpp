// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op vocabulary. All ops are pure: they return new tensors and
// record a backward closure when any input is on the tape.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dimlight/tensor.hpp"

namespace dimlight {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kDivEps = 1e-6;

// ---- elementwise ----------------------------------------------------------

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
/// Natural log; the input must be strictly positive.
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Gradient is passed through strictly inside (lo, hi) and zero elsewhere.
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

/// Binary ops broadcast every axis whose extent is 1 on one side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

[[nodiscard]] Shape broadcast_shape(const Shape& a, const Shape& b);

// ---- reductions -----------------------------------------------------------

/// Sum of all elements, shape (1,1,1,1). Left-to-right order.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Keeps the reduced axis with extent 1.
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
Tensor avg_pool_global(const Tensor& x);
/// k x k window mean, stride 1, reflection padding (output keeps H, W). k odd.
Tensor avg_pool(const Tensor& x, int k);

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}
Tensor narrow(const Tensor& x, int axis, int start, int length);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
/// Repeats a size-1 axis `count` times.
Tensor expand(const Tensor& x, int axis, int count);
Tensor flip(const Tensor& x, int axis);
Tensor upsample_nearest2x(const Tensor& x);

// ---- convolution / products ------------------------------------------------

enum class PadMode { kZeros, kReflect };

struct ConvOptions {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int groups = 1;
  PadMode pad_mode = PadMode::kZeros;
};

/// Cross-correlation. w: [Cout, Cin/groups, kh, kw]; b: [1, Cout, 1, 1] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvOptions& opts);
/// Per-pixel affine map over channels. w: [Cout, Cin, 1, 1].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Batched product over the last two axes: [N,C,M,K] x [N,C,K,P] -> [N,C,M,P].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);

/// Reflection-padded k x k patches: [N,C,H,W] -> [N, C, k*k, H*W]. Candidate
/// j corresponds to offset (j / k - k/2, j % k - k/2); the center is (k*k-1)/2.
Tensor unfold(const Tensor& x, int k);

/// Selects along axis 2 per (n, column): x [N,C,J,L], index [N][K][L] flattened
/// -> [N,C,K,L]. Indices are constants for differentiation.
Tensor gather_axis2(const Tensor& x, std::span<const int> index, int k);

/// Inverted dropout. Identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool train);

// ---- frequency domain -------------------------------------------------------

struct ComplexTensor {
  Tensor re;
  Tensor im;
};

/// Per-plane 2-D DFT (unnormalized), center-shifted so the zero frequency sits
/// at (H/2, W/2). Power-of-two extents use radix-2; others a direct DFT.
ComplexTensor fft2(const Tensor& x);
/// Inverse of fft2 (undoes the shift, divides by H*W) returning the real part.
/// `max_imag`, when given, receives the largest discarded |imag|.
Tensor ifft2(const ComplexTensor& z, double* max_imag = nullptr);

}  // namespace dimlight
