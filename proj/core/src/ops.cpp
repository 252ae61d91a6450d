// SPDX-License-Identifier: Apache-2.0

#include "dimlight/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "dimlight/random.hpp"

namespace dimlight {

namespace {

using Values = std::vector<double>;

std::array<std::size_t, 4> strides_of(const Shape& s) {
  return {static_cast<std::size_t>(s.c) * s.h * s.w, static_cast<std::size_t>(s.h) * s.w,
          static_cast<std::size_t>(s.w), 1};
}

template <class F, class D>
Tensor unary(const Tensor& x, std::string_view op, F f, D df) {
  auto in = x.values();
  Values out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(
      x.shape(), std::move(out), {x},
      [x, df](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto xv = x.values();
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * df(xv[i]);
      },
      op);
}

// Piecewise op: branch(v) picks a piece, f(piece, v) and df(piece, v) evaluate
// it. The pieces are frozen under BranchFreeze replay.
template <class B, class F, class D>
Tensor piecewise(const Tensor& x, std::string_view op, B branch_of, F f, D df) {
  auto in = x.values();
  auto pieces = std::make_shared<std::vector<int>>(
      branch::pattern(in.size(), [&](std::size_t i) { return branch_of(in[i]); }));
  Values out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f((*pieces)[i], in[i]);
  return make_result(
      x.shape(), std::move(out), {x},
      [x, df, pieces](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto xv = x.values();
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * df((*pieces)[i], xv[i]);
      },
      op);
}

double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> sa{};
  std::array<std::size_t, 4> sb{};
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  p.out = broadcast_shape(a, b);
  const auto ta = strides_of(a);
  const auto tb = strides_of(b);
  for (int ax = 0; ax < 4; ++ax) {
    p.sa[ax] = a[ax] == 1 && p.out[ax] != 1 ? 0 : ta[ax];
    p.sb[ax] = b[ax] == 1 && p.out[ax] != 1 ? 0 : tb[ax];
  }
  return p;
}

// Visits every output index with the matching offsets into a and b.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < p.out.n; ++n)
    for (int c = 0; c < p.out.c; ++c)
      for (int h = 0; h < p.out.h; ++h) {
        const std::size_t ba = n * p.sa[0] + c * p.sa[1] + h * p.sa[2];
        const std::size_t bb = n * p.sb[0] + c * p.sb[1] + h * p.sb[2];
        for (int w = 0; w < p.out.w; ++w, ++o) f(o, ba + w * p.sa[3], bb + w * p.sb[3]);
      }
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, F f, DA da, DB db) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape());
  auto av = a.values();
  auto bv = b.values();
  Values out(p.out.numel());
  for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = f(av[ia], bv[ib]);
  });
  return make_result(
      p.out, std::move(out), {a, b},
      [a, b, p, da, db](std::span<const double> g, GradSinks& sinks) {
        auto av = a.values();
        auto bv = b.values();
        for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (sinks[0]) (*sinks[0])[ia] += g[o] * da(av[ia], bv[ib]);
          if (sinks[1]) (*sinks[1])[ib] += g[o] * db(av[ia], bv[ib]);
        });
      },
      op);
}

void require_axis(int axis) {
  if (axis < 0 || axis > 3) throw DimensionError("axis out of range: " + std::to_string(axis));
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  for (int ax = 0; ax < 4; ++ax) {
    const int ea = a[ax];
    const int eb = b[ax];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + a.str() + " with " + b.str());
    }
    const int e = ea == 1 ? eb : ea;
    switch (ax) {
      case 0: out.n = e; break;
      case 1: out.c = e; break;
      case 2: out.h = e; break;
      default: out.w = e; break;
    }
  }
  return out;
}

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](double v) { return -v; }, [](double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); },
               [](double v) { return std::exp(v); });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0)) throw NumericsError("log of non-positive value");
  }
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0) throw NumericsError("sqrt of negative value");
  }
  return unary(x, "sqrt", [](double v) { return std::sqrt(v); },
               [](double v) { return 0.5 / std::sqrt(v); });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return piecewise(
      x, "abs", [](double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); },
      [](int p, double v) { return p * v; }, [](int p, double) { return static_cast<double>(p); });
}

Tensor relu(const Tensor& x) {
  return piecewise(
      x, "relu", [](double v) { return v > 0 ? 1 : 0; }, [](int p, double v) { return p ? v : 0.0; },
      [](int p, double) { return p ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return piecewise(
      x, "leaky_relu", [](double v) { return v > 0 ? 1 : 0; },
      [slope](int p, double v) { return p ? v : slope * v; },
      [slope](int p, double) { return p ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", sigmoid_value, [](double v) {
    const double s = sigmoid_value(v);
    return s * (1.0 - s);
  });
}

Tensor silu(const Tensor& x) {
  return unary(x, "silu", [](double v) { return v * sigmoid_value(v); },
               [](double v) {
                 const double s = sigmoid_value(v);
                 return s * (1.0 + v * (1.0 - s));
               });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); },
               [](double v) {
                 const double t = std::tanh(v);
                 return 1.0 - t * t;
               });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  // 0 below, 1 inside, 2 above. Values on a bound count as clamped.
  return piecewise(
      x, "clamp", [lo, hi](double v) { return v <= lo ? 0 : (v >= hi ? 2 : 1); },
      [lo, hi](int p, double v) { return p == 0 ? lo : (p == 2 ? hi : v); },
      [](int p, double) { return p == 1 ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return v * s; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double) { return 1.0; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values()) {
    if (v == 0.0) throw NumericsError("division by zero");
  }
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result(
      {1, 1, 1, 1}, {acc}, {x},
      [](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        for (double& v : *sinks[0]) v += g[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result(
      {1, 1, 1, 1}, {acc * inv}, {x},
      [inv](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        for (double& v : *sinks[0]) v += g[0] * inv;
      },
      "mean");
}

Tensor sum_axis(const Tensor& x, int axis) {
  require_axis(axis);
  const Shape in = x.shape();
  Shape out = in;
  switch (axis) {
    case 0: out.n = 1; break;
    case 1: out.c = 1; break;
    case 2: out.h = 1; break;
    default: out.w = 1; break;
  }
  const auto si = strides_of(in);
  const auto so = strides_of(out);
  const int extent = in[axis];
  // Maps each input element to its output slot.
  auto out_index = [si, so, axis](std::size_t i) {
    std::size_t rem = i;
    std::size_t o = 0;
    for (int ax = 0; ax < 4; ++ax) {
      const std::size_t coord = rem / si[ax];
      rem %= si[ax];
      if (ax != axis) o += coord * so[ax];
    }
    return o;
  };
  Values acc(out.numel(), 0.0);
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) acc[out_index(i)] += xv[i];
  (void)extent;
  return make_result(
      out, std::move(acc), {x},
      [out_index](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[out_index(i)];
      },
      "sum_axis");
}

Tensor mean_axis(const Tensor& x, int axis) {
  require_axis(axis);
  return scale(sum_axis(x, axis), 1.0 / x.shape()[axis]);
}

Tensor avg_pool_global(const Tensor& x) {
  const Shape s = x.shape();
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const double inv = 1.0 / static_cast<double>(plane);
  auto xv = x.values();
  Values out(static_cast<std::size_t>(s.n) * s.c);
  for (std::size_t p = 0; p < out.size(); ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[p * plane + i];
    out[p] = acc * inv;
  }
  return make_result(
      {s.n, s.c, 1, 1}, std::move(out), {x},
      [plane, inv](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t p = 0; p < g.size(); ++p)
          for (std::size_t i = 0; i < plane; ++i) gi[p * plane + i] += g[p] * inv;
      },
      "avg_pool_global");
}

Tensor avg_pool(const Tensor& x, int k) {
  if (k < 1 || k % 2 == 0) throw DimensionError("avg_pool needs an odd window");
  const int c = x.shape().c;
  const Tensor w = Tensor::full({c, 1, k, k}, 1.0 / (k * k));
  ConvOptions opts;
  opts.pad_h = opts.pad_w = k / 2;
  opts.groups = c;
  opts.pad_mode = PadMode::kReflect;
  return conv2d(x, w, Tensor(), opts);
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw DimensionError("reshape " + x.shape().str() + " -> " + shape.str());
  }
  auto xv = x.values();
  return make_result(
      shape, Values(xv.begin(), xv.end()), {x},
      [](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      },
      "reshape");
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  require_axis(axis);
  if (parts.empty()) throw DimensionError("concat of nothing");
  Shape out = parts[0].shape();
  int total = 0;
  for (const Tensor& t : parts) {
    for (int ax = 0; ax < 4; ++ax) {
      if (ax != axis && t.shape()[ax] != out[ax]) {
        throw DimensionError("concat mismatch " + t.shape().str() + " vs " + out.str());
      }
    }
    total += t.shape()[axis];
  }
  switch (axis) {
    case 0: out.n = total; break;
    case 1: out.c = total; break;
    case 2: out.h = total; break;
    default: out.w = total; break;
  }
  // Each part is a sequence of contiguous blocks: `outer` blocks of
  // extent*inner elements.
  std::size_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= out[ax];
  std::size_t inner = 1;
  for (int ax = axis + 1; ax < 4; ++ax) inner *= out[ax];
  const std::size_t out_block = static_cast<std::size_t>(total) * inner;

  Values values(out.numel());
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(offset);
    const std::size_t block = static_cast<std::size_t>(t.shape()[axis]) * inner;
    auto tv = t.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(tv.begin() + o * block, block, values.begin() + o * out_block + offset);
    offset += block;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<std::size_t> blocks;
  for (const Tensor& t : parts) blocks.push_back(static_cast<std::size_t>(t.shape()[axis]) * inner);
  return make_result(
      out, std::move(values), inputs,
      [offsets, blocks, outer, out_block](std::span<const double> g, GradSinks& sinks) {
        for (std::size_t p = 0; p < sinks.size(); ++p) {
          if (!sinks[p]) continue;
          auto& gi = *sinks[p];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < blocks[p]; ++i)
              gi[o * blocks[p] + i] += g[o * out_block + offsets[p] + i];
        }
      },
      "concat");
}

Tensor narrow(const Tensor& x, int axis, int start, int length) {
  require_axis(axis);
  const Shape in = x.shape();
  if (start < 0 || length < 0 || start + length > in[axis]) {
    throw DimensionError("narrow out of range on " + in.str());
  }
  Shape out = in;
  switch (axis) {
    case 0: out.n = length; break;
    case 1: out.c = length; break;
    case 2: out.h = length; break;
    default: out.w = length; break;
  }
  std::size_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= in[ax];
  std::size_t inner = 1;
  for (int ax = axis + 1; ax < 4; ++ax) inner *= in[ax];
  const std::size_t in_block = static_cast<std::size_t>(in[axis]) * inner;
  const std::size_t out_block = static_cast<std::size_t>(length) * inner;
  const std::size_t skip = static_cast<std::size_t>(start) * inner;
  auto xv = x.values();
  Values values(out.numel());
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + o * in_block + skip, out_block, values.begin() + o * out_block);
  return make_result(
      out, std::move(values), {x},
      [outer, in_block, out_block, skip](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < out_block; ++i) gi[o * in_block + skip + i] += g[o * out_block + i];
      },
      "narrow");
}

namespace {

// Generic axis permutation. perm[k] is the input axis placed at output axis k.
Tensor permute(const Tensor& x, std::array<int, 4> perm, std::string_view op) {
  const Shape in = x.shape();
  const Shape out{in[perm[0]], in[perm[1]], in[perm[2]], in[perm[3]]};
  const auto si = strides_of(in);
  std::vector<std::size_t> map(out.numel());
  std::size_t o = 0;
  for (int a = 0; a < out.n; ++a)
    for (int b = 0; b < out.c; ++b)
      for (int c = 0; c < out.h; ++c)
        for (int d = 0; d < out.w; ++d, ++o) {
          map[o] = a * si[perm[0]] + b * si[perm[1]] + c * si[perm[2]] + d * si[perm[3]];
        }
  auto xv = x.values();
  Values values(out.numel());
  for (std::size_t i = 0; i < map.size(); ++i) values[i] = xv[map[i]];
  auto shared = std::make_shared<std::vector<std::size_t>>(std::move(map));
  return make_result(
      out, std::move(values), {x},
      [shared](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[(*shared)[i]] += g[i];
      },
      op);
}

}  // namespace

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  require_axis(axis_a);
  require_axis(axis_b);
  std::array<int, 4> perm{0, 1, 2, 3};
  std::swap(perm[axis_a], perm[axis_b]);
  return permute(x, perm, "transpose");
}

Tensor expand(const Tensor& x, int axis, int count) {
  require_axis(axis);
  if (x.shape()[axis] != 1) throw DimensionError("expand needs a size-1 axis");
  Shape target = x.shape();
  switch (axis) {
    case 0: target.n = count; break;
    case 1: target.c = count; break;
    case 2: target.h = count; break;
    default: target.w = count; break;
  }
  return add(x, Tensor::zeros(target));
}

Tensor flip(const Tensor& x, int axis) {
  require_axis(axis);
  const Shape s = x.shape();
  const auto st = strides_of(s);
  std::vector<std::size_t> map(s.numel());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w, ++o) {
          std::array<int, 4> idx{n, c, h, w};
          idx[axis] = s[axis] - 1 - idx[axis];
          map[o] = idx[0] * st[0] + idx[1] * st[1] + idx[2] * st[2] + idx[3];
        }
  auto xv = x.values();
  Values values(s.numel());
  for (std::size_t i = 0; i < map.size(); ++i) values[i] = xv[map[i]];
  auto shared = std::make_shared<std::vector<std::size_t>>(std::move(map));
  return make_result(
      s, std::move(values), {x},
      [shared](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t i = 0; i < g.size(); ++i) gi[(*shared)[i]] += g[i];
      },
      "flip");
}

Tensor upsample_nearest2x(const Tensor& x) {
  const Shape in = x.shape();
  const Shape out{in.n, in.c, in.h * 2, in.w * 2};
  auto xv = x.values();
  Values values(out.numel());
  std::size_t o = 0;
  for (int p = 0; p < in.n * in.c; ++p)
    for (int h = 0; h < out.h; ++h)
      for (int w = 0; w < out.w; ++w, ++o)
        values[o] = xv[(static_cast<std::size_t>(p) * in.h + h / 2) * in.w + w / 2];
  return make_result(
      out, std::move(values), {x},
      [in, out](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        std::size_t o = 0;
        for (int p = 0; p < in.n * in.c; ++p)
          for (int h = 0; h < out.h; ++h)
            for (int w = 0; w < out.w; ++w, ++o)
              gi[(static_cast<std::size_t>(p) * in.h + h / 2) * in.w + w / 2] += g[o];
      },
      "upsample_nearest2x");
}

// ---- products -------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape ws = w.shape();
  if (ws.h != 1 || ws.w != 1 || ws.c != x.shape().c) {
    throw DimensionError("linear weight " + ws.str() + " does not fit input " + x.shape().str());
  }
  return conv2d(x, w, b, ConvOptions{});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.c != sb.c || sa.w != sb.h) {
    throw DimensionError("matmul " + sa.str() + " x " + sb.str());
  }
  const int m = sa.h;
  const int k = sa.w;
  const int p = sb.w;
  const int batches = sa.n * sa.c;
  const Shape out{sa.n, sa.c, m, p};
  auto av = a.values();
  auto bv = b.values();
  Values values(out.numel(), 0.0);
  for (int bt = 0; bt < batches; ++bt) {
    const double* A = av.data() + static_cast<std::size_t>(bt) * m * k;
    const double* B = bv.data() + static_cast<std::size_t>(bt) * k * p;
    double* C = values.data() + static_cast<std::size_t>(bt) * m * p;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double aik = A[i * k + kk];
        for (int j = 0; j < p; ++j) C[i * p + j] += aik * B[kk * p + j];
      }
  }
  return make_result(
      out, std::move(values), {a, b},
      [a, b, m, k, p, batches](std::span<const double> g, GradSinks& sinks) {
        auto av = a.values();
        auto bv = b.values();
        for (int bt = 0; bt < batches; ++bt) {
          const double* A = av.data() + static_cast<std::size_t>(bt) * m * k;
          const double* B = bv.data() + static_cast<std::size_t>(bt) * k * p;
          const double* G = g.data() + static_cast<std::size_t>(bt) * m * p;
          if (sinks[0]) {
            double* GA = sinks[0]->data() + static_cast<std::size_t>(bt) * m * k;
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                double acc = 0.0;
                for (int j = 0; j < p; ++j) acc += G[i * p + j] * B[kk * p + j];
                GA[i * k + kk] += acc;
              }
          }
          if (sinks[1]) {
            double* GB = sinks[1]->data() + static_cast<std::size_t>(bt) * k * p;
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                const double aik = A[i * k + kk];
                for (int j = 0; j < p; ++j) GB[kk * p + j] += aik * G[i * p + j];
              }
          }
        }
      },
      "matmul");
}

Tensor softmax(const Tensor& x, int axis) {
  require_axis(axis);
  const Shape s = x.shape();
  const auto st = strides_of(s);
  const int extent = s[axis];
  const std::size_t stride = st[axis];
  // Slice starts: all indices whose coordinate on `axis` is zero.
  std::vector<std::size_t> starts;
  starts.reserve(s.numel() / std::max(extent, 1));
  for (std::size_t i = 0; i < s.numel(); ++i) {
    if ((i / stride) % extent == 0) starts.push_back(i);
  }
  auto xv = x.values();
  auto y = std::make_shared<Values>(s.numel());
  for (std::size_t start : starts) {
    double mx = xv[start];
    for (int j = 1; j < extent; ++j) mx = std::max(mx, xv[start + j * stride]);
    double z = 0.0;
    for (int j = 0; j < extent; ++j) {
      const double e = std::exp(xv[start + j * stride] - mx);
      (*y)[start + j * stride] = e;
      z += e;
    }
    for (int j = 0; j < extent; ++j) (*y)[start + j * stride] /= z;
  }
  auto shared_starts = std::make_shared<std::vector<std::size_t>>(std::move(starts));
  return make_result(
      s, *y, {x},
      [y, shared_starts, extent, stride](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (std::size_t start : *shared_starts) {
          double dot = 0.0;
          for (int j = 0; j < extent; ++j) dot += g[start + j * stride] * (*y)[start + j * stride];
          for (int j = 0; j < extent; ++j) {
            const std::size_t i = start + j * stride;
            gi[i] += (*y)[i] * (g[i] - dot);
          }
        }
      },
      "softmax");
}

Tensor unfold(const Tensor& x, int k) {
  if (k < 1 || k % 2 == 0) throw DimensionError("unfold needs an odd window, got " + std::to_string(k));
  const Shape s = x.shape();
  const int kk = k * k;
  const int r = k / 2;
  const int hw = s.h * s.w;
  const Shape out{s.n, s.c, kk, hw};
  // Source offset inside a plane for each (candidate, pixel).
  auto map = std::make_shared<std::vector<int>>(static_cast<std::size_t>(kk) * hw);
  for (int j = 0; j < kk; ++j) {
    const int dy = j / k - r;
    const int dx = j % k - r;
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w)
        (*map)[static_cast<std::size_t>(j) * hw + h * s.w + w] =
            reflect_index(h + dy, s.h) * s.w + reflect_index(w + dx, s.w);
  }
  auto xv = x.values();
  Values values(out.numel());
  const std::size_t plane_out = static_cast<std::size_t>(kk) * hw;
  for (int p = 0; p < s.n * s.c; ++p) {
    const double* src = xv.data() + static_cast<std::size_t>(p) * hw;
    double* dst = values.data() + p * plane_out;
    for (std::size_t i = 0; i < plane_out; ++i) dst[i] = src[(*map)[i]];
  }
  return make_result(
      out, std::move(values), {x},
      [map, s, hw, plane_out](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        for (int p = 0; p < s.n * s.c; ++p) {
          double* dst = gi.data() + static_cast<std::size_t>(p) * hw;
          const double* src = g.data() + p * plane_out;
          for (std::size_t i = 0; i < plane_out; ++i) dst[(*map)[i]] += src[i];
        }
      },
      "unfold");
}

Tensor gather_axis2(const Tensor& x, std::span<const int> index, int k) {
  const Shape s = x.shape();
  const int l = s.w;
  if (index.size() != static_cast<std::size_t>(s.n) * k * l) {
    throw DimensionError("gather index size mismatch for " + s.str());
  }
  for (int v : index) {
    if (v < 0 || v >= s.h) throw DimensionError("gather index out of range");
  }
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  const Shape out{s.n, s.c, k, l};
  auto xv = x.values();
  Values values(out.numel());
  auto src_of = [s, k, l, idx](int n, int c, int j, int col) {
    const int row = (*idx)[(static_cast<std::size_t>(n) * k + j) * l + col];
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + row) * l + col;
  };
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int j = 0; j < k; ++j)
        for (int col = 0; col < l; ++col, ++o) values[o] = xv[src_of(n, c, j, col)];
  return make_result(
      out, std::move(values), {x},
      [out, src_of](std::span<const double> g, GradSinks& sinks) {
        if (!sinks[0]) return;
        auto& gi = *sinks[0];
        std::size_t o = 0;
        for (int n = 0; n < out.n; ++n)
          for (int c = 0; c < out.c; ++c)
            for (int j = 0; j < out.h; ++j)
              for (int col = 0; col < out.w; ++col, ++o) gi[src_of(n, c, j, col)] += g[o];
      },
      "gather_axis2");
}

Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool train) {
  if (!(p >= 0.0 && p < 1.0)) throw NumericsError("dropout probability must lie in [0,1)");
  if (!train || p == 0.0) return x;
  Rng rng(seed);
  Values mask(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask) m = rng.uniform() >= p ? keep : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace dimlight
