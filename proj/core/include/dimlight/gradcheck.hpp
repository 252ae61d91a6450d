// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dimlight/tensor.hpp"

namespace dimlight {

/// Central differences (f(t + eps e_i) - f(t - eps e_i)) / 2 eps per
/// coordinate, accumulated in 64 bits. `f` is evaluated twice at `theta`
/// first; differing results mean it is not deterministic and are rejected.
/// `coords`, when non-empty, restricts the probe to those flat indices (the
/// remaining entries are left at zero). `order` 4 switches to the five-point
/// stencil (-f(+2e) + 8f(+e) - 8f(-e) + f(-2e)) / 12 eps, whose O(eps^4)
/// truncation error allows larger steps and so less cancellation noise.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                   double eps = 1e-3, const std::vector<std::size_t>& coords = {},
                   int order = 2);

/// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|, floor) over `coords`
/// (all when empty).
double relative_error(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& coords = {},
                      double floor = 1e-8);

/// One checked parameter.
struct GradCheckEntry {
  std::string name;
  std::size_t probed = 0;
  double max_abs_grad = 0.0;
  double rel_error = 0.0;
};

/// Compares backward() against the five-point fd_gradient for every tensor in
/// `params`, with `loss` rebuilding the graph on each call. Runs in shadow
/// (64-bit) precision with the branch pattern of the analytic pass frozen
/// (see BranchFreeze), so probes never straddle a relu or clamp kink. At most
/// `max_coords` coordinates are probed per tensor (evenly spread).
std::vector<GradCheckEntry> check_gradients(const std::function<Tensor()>& loss,
                                            const ParameterSet& params, double eps = 1e-3,
                                            std::size_t max_coords = 64);

}  // namespace dimlight
