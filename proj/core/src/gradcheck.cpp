// SPDX-License-Identifier: Apache-2.0

#include "dimlight/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dimlight {

namespace {

std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

std::vector<std::size_t> spread_coords(std::size_t n, std::size_t max_coords) {
  if (n <= max_coords) return all_coords(n);
  std::vector<std::size_t> c;
  c.reserve(max_coords);
  for (std::size_t i = 0; i < max_coords; ++i) c.push_back(i * n / max_coords);
  return c;
}

}  // namespace

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& theta, double eps,
                   const std::vector<std::size_t>& coords, int order) {
  if (order != 2 && order != 4) throw std::invalid_argument("fd_gradient: order must be 2 or 4");
  ShadowPrecision shadow;
  NoGradGuard no_grad;
  std::vector<double> base(theta.values().begin(), theta.values().end());
  const Tensor probe = Tensor::from(theta.shape(), base);
  if (f(probe) != f(probe)) {
    throw NumericsError("fd_gradient: function is not deterministic");
  }
  const auto idx = coords.empty() ? all_coords(base.size()) : coords;
  std::vector<double> grad(base.size(), 0.0);
  std::vector<double> work = base;
  auto at = [&](std::size_t i, double step) {
    work[i] = base[i] + step;
    const double v = f(Tensor::from(theta.shape(), work));
    work[i] = base[i];
    return v;
  };
  for (std::size_t i : idx) {
    if (order == 2) {
      grad[i] = (at(i, eps) - at(i, -eps)) / (2.0 * eps);
    } else {
      grad[i] = (-at(i, 2 * eps) + 8.0 * at(i, eps) - 8.0 * at(i, -eps) + at(i, -2 * eps)) / (12.0 * eps);
    }
  }
  return Tensor::from(theta.shape(), std::move(grad));
}

double relative_error(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& coords,
                      double floor) {
  if (a.shape() != b.shape()) throw DimensionError("relative_error shape mismatch");
  const auto idx = coords.empty() ? all_coords(a.numel()) : coords;
  auto av = a.values();
  auto bv = b.values();
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i : idx) {
    diff = std::max(diff, std::abs(av[i] - bv[i]));
    scale = std::max({scale, std::abs(av[i]), std::abs(bv[i])});
  }
  return diff / scale;
}

std::vector<GradCheckEntry> check_gradients(const std::function<Tensor()>& loss,
                                            const ParameterSet& params, double eps,
                                            std::size_t max_coords) {
  ShadowPrecision shadow;
  BranchFreeze freeze;
  const Gradients analytic = backward(loss(), params);
  freeze.replay();
  std::vector<GradCheckEntry> report;
  for (const auto& [name, param] : params.entries()) {
    Tensor leaf = param;
    const std::vector<double> saved(leaf.values().begin(), leaf.values().end());
    const auto coords = spread_coords(leaf.numel(), max_coords);
    auto f = [&](const Tensor& theta) {
      leaf.assign(theta.values());
      NoGradGuard no_grad;
      freeze.rewind();
      const double v = loss().item();
      if (freeze.unconsumed() != 0) throw std::logic_error("check_gradients: loss skipped recorded branches");
      return v;
    };
    const Tensor numeric = fd_gradient(f, leaf, eps, coords, 4);
    leaf.assign(saved);
    const Tensor& g = analytic.at(name);
    GradCheckEntry e;
    e.name = name;
    e.probed = coords.size();
    for (std::size_t i : coords) e.max_abs_grad = std::max(e.max_abs_grad, std::abs(g.values()[i]));
    e.rel_error = relative_error(g, numeric, coords);
    report.push_back(e);
  }
  return report;
}

}  // namespace dimlight
