// SPDX-License-Identifier: Apache-2.0

#include "dimlight/causal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dimlight/random.hpp"

namespace dimlight {

namespace {

constexpr double kDistEps = 1e-6;
constexpr double kNormEps = 1e-6;

// Start offset and stride of every scan line of a [N,C,H,W] tensor along
// `axis`, plus the channel of each line.
struct Lines {
  std::vector<std::size_t> start;
  std::vector<int> channel;
  std::size_t stride = 1;
  int length = 0;
};

Lines lines_of(const Shape& s, int axis) {
  Lines l;
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  if (axis == 3) {
    l.stride = 1;
    l.length = s.w;
  } else {
    l.stride = static_cast<std::size_t>(s.w);
    l.length = s.h;
  }
  const int across = axis == 3 ? s.h : s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < across; ++i) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        l.start.push_back(base + (axis == 3 ? static_cast<std::size_t>(i) * s.w : static_cast<std::size_t>(i)));
        l.channel.push_back(c);
      }
  return l;
}

void check_coeff(const Tensor& t, int channels, const char* what) {
  if (t.shape() != Shape{1, channels, 1, 1}) {
    throw DimensionError(std::string("linear_recurrence: ") + what + " must be [1,C,1,1], got " +
                         t.shape().str());
  }
}

}  // namespace

Tensor linear_recurrence(const Tensor& u, const Tensor& a, const Tensor& b, int axis, bool reverse,
                         bool steady_start) {
  if (axis != 2 && axis != 3) throw DimensionError("linear_recurrence: axis must be 2 or 3");
  const Shape s = u.shape();
  check_coeff(a, s.c, "a");
  check_coeff(b, s.c, "b");
  auto lines = std::make_shared<Lines>(lines_of(s, axis));
  auto uv = u.values();
  auto av = a.values();
  auto bv = b.values();
  auto states = std::make_shared<std::vector<double>>(s.numel());
  const int len = lines->length;
  auto pos = [lines, len, reverse](std::size_t line, int t) {
    const int step = reverse ? len - 1 - t : t;
    return lines->start[line] + static_cast<std::size_t>(step) * lines->stride;
  };
  for (std::size_t i = 0; i < lines->start.size(); ++i) {
    const int c = lines->channel[i];
    double h = 0.0;
    for (int t = 0; t < len; ++t) {
      const std::size_t p = pos(i, t);
      h = t == 0 && steady_start ? bv[c] * uv[p] / (1.0 - av[c]) : av[c] * h + bv[c] * uv[p];
      (*states)[p] = h;
    }
  }
  std::vector<double> out = *states;
  return make_result(
      s, std::move(out), {u, a, b},
      [u, a, b, lines, states, pos, len, steady_start](std::span<const double> g, GradSinks& sinks) {
        auto uv = u.values();
        auto av = a.values();
        auto bv = b.values();
        for (std::size_t i = 0; i < lines->start.size(); ++i) {
          const int c = lines->channel[i];
          double carry = 0.0;  // dL/dh_{t+1} times a
          for (int t = len - 1; t >= 0; --t) {
            const std::size_t p = pos(i, t);
            const double gh = g[p] + carry;
            if (t == 0 && steady_start) {
              // h_0 = b u_0 / (1 - a)
              const double inv = 1.0 / (1.0 - av[c]);
              if (sinks[0]) (*sinks[0])[p] += bv[c] * inv * gh;
              if (sinks[1]) (*sinks[1])[c] += gh * bv[c] * uv[p] * inv * inv;
              if (sinks[2]) (*sinks[2])[c] += gh * uv[p] * inv;
              break;
            }
            if (sinks[0]) (*sinks[0])[p] += bv[c] * gh;
            if (sinks[1] && t > 0) (*sinks[1])[c] += gh * (*states)[pos(i, t - 1)];
            if (sinks[2]) (*sinks[2])[c] += gh * uv[p];
            carry = av[c] * gh;
          }
        }
      },
      "linear_recurrence");
}

SsmParams SsmParams::create(const Builder& b, const std::string& name, int dim) {
  SsmParams p;
  // A starts in (0.46, 0.91): long enough memory to matter on small tiles.
  Rng rng(mix_seed(b.seed, hash_name(name + ".a_raw")));
  std::vector<double> a(static_cast<std::size_t>(dim));
  for (double& v : a) v = rng.uniform(0.5, 1.5);
  p.a_raw = b.params.add(name + ".a_raw", {1, dim, 1, 1}, std::move(a));
  p.b = b.uniform(name + ".b", {1, dim, 1, 1}, 1.0);
  p.c = b.uniform(name + ".c", {1, dim, 1, 1}, 1.0);
  p.d = b.constant(name + ".d", {1, dim, 1, 1}, 1.0);
  p.tau = b.constant(name + ".tau", {4, dim, 1, 1}, 0.0);
  return p;
}

Tensor SsmParams::offset(int dir) const {
  if (dir < 0 || dir > 3) throw DimensionError("scan direction must be in 0..3");
  return narrow(tau, 0, dir, 1);
}

Tensor ssm_scan_1d(const Tensor& seq, const SsmParams& p, int direction) {
  if (seq.shape().h != 1) throw DimensionError("ssm_scan_1d expects [N,dim,1,T], got " + seq.shape().str());
  const Tensor u = seq + p.offset(direction);
  const Tensor h = linear_recurrence(u, p.a(), p.b, 3, false);
  return p.c * h + p.d * u;
}

Tensor scan_direction(const Tensor& f, const SsmParams& p, ScanDirection dir, bool steady_start) {
  const int d = static_cast<int>(dir);
  const int axis = d < 2 ? 3 : 2;
  const bool reverse = d % 2 == 1;
  const Tensor u = f + p.offset(d);
  const Tensor h = linear_recurrence(u, p.a(), p.b, axis, reverse, steady_start);
  return p.c * h + p.d * u;
}

Tensor scan_2d(const Tensor& f, const SsmParams& p, bool steady_start) {
  Tensor acc = scan_direction(f, p, ScanDirection::kRowForward, steady_start);
  for (auto dir : {ScanDirection::kRowBackward, ScanDirection::kColForward, ScanDirection::kColBackward}) {
    acc = acc + scan_direction(f, p, dir, steady_start);
  }
  return acc * 0.25;
}

Neco::Neco(const Builder& b, const std::string& name, int channels, bool steady_start)
    : near_(b, name + ".near", channels, channels, 3, 1, channels),
      in_proj_(b, name + ".in_proj", channels, channels),
      dw_(b, name + ".dw", channels, channels, 3, 1, channels),
      ssm_(SsmParams::create(b, name + ".ssm", channels)),
      norm_(b, name + ".norm", channels),
      gate_(b, name + ".gate", channels, channels),
      out_proj_(b, name + ".out_proj", channels, channels),
      steady_start_(steady_start) {}

Tensor Neco::operator()(const Tensor& f1) const {
  const Tensor local = staged("neco.local", [&] { return silu(dw_(in_proj_(near_(f1)))); });
  const Tensor scanned = staged("neco.scan", [&] { return norm_(scan_2d(local, ssm_, steady_start_)); });
  return staged("neco.out", [&] { return out_proj_(scanned * silu(gate_(f1))); });
}

std::vector<double> candidate_distances(const Tensor& f, int patch) {
  const Shape s = f.shape();
  const int kk = patch * patch;
  const int hw = s.h * s.w;
  const int center = (kk - 1) / 2;
  Tensor cand;
  {
    NoGradGuard no_grad;
    cand = unfold(f, patch);
  }
  auto cv = cand.values();
  auto fv = f.values();
  std::vector<double> dist(static_cast<std::size_t>(s.n) * kk * hw, 0.0);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int j = 0; j < kk; ++j) {
        if (j == center) continue;
        const std::size_t src = ((static_cast<std::size_t>(n) * s.c + c) * kk + j) * hw;
        const std::size_t ctr = (static_cast<std::size_t>(n) * s.c + c) * hw;
        double* dst = dist.data() + (static_cast<std::size_t>(n) * kk + j) * hw;
        for (int l = 0; l < hw; ++l) {
          const double diff = cv[src + l] - fv[ctr + l];
          dst[l] += diff * diff;
        }
      }
  for (int n = 0; n < s.n; ++n)
    for (int l = 0; l < hw; ++l) {
      double mx = 0.0;
      for (int j = 0; j < kk; ++j) {
        double& d = dist[(static_cast<std::size_t>(n) * kk + j) * hw + l];
        d = std::sqrt(d);
        mx = std::max(mx, d);
      }
      for (int j = 0; j < kk; ++j) dist[(static_cast<std::size_t>(n) * kk + j) * hw + l] /= mx + kDistEps;
    }
  return dist;
}

std::vector<int> select_neighbors(const Tensor& f, int k, int patch) {
  if (patch < 1 || patch % 2 == 0) throw DimensionError("asc patch must be odd, got " + std::to_string(patch));
  const int kk = patch * patch;
  if (k < 1 || k >= kk) {
    throw DimensionError("asc needs 1 <= k < patch^2, got k=" + std::to_string(k) + " patch=" +
                         std::to_string(patch));
  }
  const Shape s = f.shape();
  const int hw = s.h * s.w;
  const int center = (kk - 1) / 2;
  const std::vector<double> dist = candidate_distances(f, patch);
  std::vector<int> sel(static_cast<std::size_t>(s.n) * k * hw);
  std::vector<int> order(static_cast<std::size_t>(kk - 1));
  for (int n = 0; n < s.n; ++n)
    for (int l = 0; l < hw; ++l) {
      auto d = [&](int j) { return dist[(static_cast<std::size_t>(n) * kk + j) * hw + l]; };
      std::size_t o = 0;
      for (int j = 0; j < kk; ++j)
        if (j != center) order[o++] = j;
      std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int x, int y) {
        return d(x) < d(y) || (d(x) == d(y) && x < y);
      });
      for (int i = 0; i < k; ++i) sel[(static_cast<std::size_t>(n) * k + i) * hw + l] = order[static_cast<std::size_t>(i)];
    }
  return sel;
}

Asc::Asc(const Builder& b, const std::string& name, int channels, int k, int patch)
    : csco_(b, name + ".csco", channels, channels),
      cluster1_(b, name + ".cluster1", 2 * channels, channels, 3, 1,
                ConvOptions{1, 1, 0, 1, PadMode::kZeros}),
      cluster2_(b, name + ".cluster2", channels, channels, 3, 1,
                ConvOptions{1, 1, 0, 1, PadMode::kZeros}),
      fuse_(b, name + ".fuse", 2 * channels, channels),
      k_(k),
      patch_(patch) {
  if (patch < 1 || patch % 2 == 0 || k < 1 || k >= patch * patch) {
    throw DimensionError(name + ": needs odd patch and 1 <= k < patch^2");
  }
}

Tensor Asc::operator()(const Tensor& f, Trace* trace) const {
  const Shape s = f.shape();
  const int hw = s.h * s.w;
  std::vector<int> computed;
  const std::vector<int> sel = branch::pattern(static_cast<std::size_t>(s.n) * k_ * hw, [&](std::size_t i) {
    if (computed.empty()) computed = select_neighbors(f, k_, patch_);
    return computed[i];
  });

  const Tensor center = reshape(f, {s.n, s.c, 1, hw});
  const Tensor neighbor = staged("asc.neighbor", [&] {
    const Tensor diff = gather_axis2(unfold(f, patch_), sel, k_) - center;
    const Tensor unit = diff / sqrt(add_scalar(sum_axis(square(diff), 1), kNormEps));
    return csco_(unit);
  });
  const Tensor cluster = staged("asc.cluster", [&] {
    const Tensor joint = concat({expand(center, 2, k_), neighbor}, 1);
    return sigmoid(cluster2_(silu(cluster1_(joint))));
  });
  const Tensor relation = reshape(sum_axis(cluster * neighbor, 2), s);
  if (trace) *trace = Trace{sel, neighbor, cluster, relation};
  return staged("asc.fuse", [&] { return fuse_(concat({relation, f}, 1)); });
}

}  // namespace dimlight
