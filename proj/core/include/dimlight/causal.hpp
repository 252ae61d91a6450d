// SPDX-License-Identifier: Apache-2.0
//
// Causal context blocks. NeCo (encoder) runs a diagonal state-space scan in
// four directions with a learnable per-direction input offset. AsC (decoder)
// calibrates each pixel against its k most similar neighbours in a window.

#pragma once

#include <string>
#include <vector>

#include "dimlight/layers.hpp"

namespace dimlight {

/// Scan orders. Rows and columns are scanned as independent lines.
enum class ScanDirection { kRowForward = 0, kRowBackward = 1, kColForward = 2, kColBackward = 3 };

/// h_t = a h_{t-1} + b u_t along `axis` (2 or 3), per channel. a, b: [1,C,1,1].
/// Returns the states h. Lines start from h = 0, or with `steady_start` from
/// the fixed point of their first input, h_0 = b u_0 / (1 - a), so a constant
/// line gives a constant state. Needs |a| < 1 for the latter.
Tensor linear_recurrence(const Tensor& u, const Tensor& a, const Tensor& b, int axis, bool reverse,
                         bool steady_start = false);

/// Per-channel diagonal state space with one input offset per direction.
struct SsmParams {
  Tensor a_raw;  ///< A = tanh(a_raw), so |A| < 1.
  Tensor b;
  Tensor c;
  Tensor d;
  Tensor tau;  ///< [4, dim, 1, 1], row = ScanDirection.

  static SsmParams create(const Builder& b, const std::string& name, int dim);
  [[nodiscard]] Tensor a() const { return tanh(a_raw); }
  /// Row `dir` of tau as [1, dim, 1, 1].
  [[nodiscard]] Tensor offset(int dir) const;
};

/// seq: [N, dim, 1, T]. y_t = C h_t + D (x_t + tau), h_t = A h_{t-1} + B (x_t + tau).
Tensor ssm_scan_1d(const Tensor& seq, const SsmParams& p, int direction);
/// Mean of the four directional scans of f [N,C,H,W].
Tensor scan_2d(const Tensor& f, const SsmParams& p, bool steady_start = false);
/// One directional scan of f.
Tensor scan_direction(const Tensor& f, const SsmParams& p, ScanDirection dir, bool steady_start = false);

class Neco {
 public:
  Neco() = default;
  Neco(const Builder& b, const std::string& name, int channels, bool steady_start = false);

  Tensor operator()(const Tensor& f1) const;

  [[nodiscard]] const SsmParams& ssm() const { return ssm_; }

 private:
  Conv2d near_;
  Linear in_proj_;
  Conv2d dw_;
  SsmParams ssm_;
  ChannelNorm norm_;
  Linear gate_;
  Linear out_proj_;
  bool steady_start_ = false;
};

inline constexpr int kAscNeighbors = 8;
inline constexpr int kAscPatch = 5;

/// Candidate distances ||cand - center||_2 over channels divided by the
/// per-pixel maximum (+1e-6). f: [N,C,H,W] -> [N][patch^2][H*W] flattened;
/// the center entry is 0 and never selected.
std::vector<double> candidate_distances(const Tensor& f, int patch);

/// The k nearest candidates per pixel, ascending by distance, ties by lower
/// candidate index. Returns [N][k][H*W] flattened.
std::vector<int> select_neighbors(const Tensor& f, int k, int patch);

class Asc {
 public:
  Asc() = default;
  Asc(const Builder& b, const std::string& name, int channels, int k = kAscNeighbors,
      int patch = kAscPatch);

  struct Trace {
    std::vector<int> selection;
    Tensor neighbor;  ///< [N,C,k,HW]
    Tensor cluster;   ///< [N,C,k,HW], in (0,1)
    Tensor relation;  ///< [N,C,H,W]
  };

  Tensor operator()(const Tensor& f, Trace* trace = nullptr) const;

  [[nodiscard]] int k() const { return k_; }
  [[nodiscard]] int patch() const { return patch_; }

 private:
  Linear csco_;
  Conv2d cluster1_;
  Conv2d cluster2_;
  Linear fuse_;
  int k_ = kAscNeighbors;
  int patch_ = kAscPatch;
};

}  // namespace dimlight
