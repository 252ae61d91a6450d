// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dimlight/causal.hpp"
#include "test_util.hpp"

using namespace dimlight;
using testutil::random_tensor;

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

void set_param(ParameterSet& ps, const std::string& name, std::vector<double> v) {
  Tensor t = ps.get(name);
  t.assign(v);
}

// Unrolled scan of one direction with explicit loops.
std::vector<double> direction_oracle(const Tensor& f, const std::vector<double>& a,
                                     const std::vector<double>& b, const std::vector<double>& c,
                                     const std::vector<double>& d, const std::vector<double>& tau,
                                     int dir) {
  const Shape s = f.shape();
  std::vector<double> out(s.numel());
  for (int n = 0; n < s.n; ++n)
    for (int ch = 0; ch < s.c; ++ch) {
      const double t = tau[static_cast<std::size_t>(dir * s.c + ch)];
      const int lines = dir < 2 ? s.h : s.w;
      const int len = dir < 2 ? s.w : s.h;
      for (int line = 0; line < lines; ++line) {
        double h = 0.0;
        for (int step = 0; step < len; ++step) {
          const int pos = dir % 2 == 0 ? step : len - 1 - step;
          const int y = dir < 2 ? line : pos;
          const int x = dir < 2 ? pos : line;
          const double u = f.at(n, ch, y, x) + t;
          h = a[ch] * h + b[ch] * u;
          out[testutil::idx(s, n, ch, y, x)] = c[ch] * h + d[ch] * u;
        }
      }
    }
  return out;
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Selection by a full sort of unnormalized distances.
std::vector<int> sort_oracle(const Tensor& f, int k, int patch, int n, int y, int x) {
  const Shape s = f.shape();
  const int r = patch / 2;
  std::vector<std::pair<double, int>> cands;
  for (int j = 0; j < patch * patch; ++j) {
    if (j == (patch * patch - 1) / 2) continue;
    const int yy = reflect(y + j / patch - r, s.h);
    const int xx = reflect(x + j % patch - r, s.w);
    double acc = 0.0;
    for (int c = 0; c < s.c; ++c) {
      const double diff = f.at(n, c, yy, xx) - f.at(n, c, y, x);
      acc += diff * diff;
    }
    cands.emplace_back(std::sqrt(acc), j);
  }
  std::sort(cands.begin(), cands.end());
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(cands[static_cast<std::size_t>(i)].second);
  return out;
}

}  // namespace

TEST_CASE("linear recurrence gradients, both axes and orders") {
  ParameterSet ps;
  const Tensor u = ps.add("u", random_tensor({2, 3, 4, 5}, 1));
  const Tensor a = ps.add("a", random_tensor({1, 3, 1, 1}, 2, -0.9, 0.9));
  const Tensor b = ps.add("b", random_tensor({1, 3, 1, 1}, 3));
  const Tensor r = random_tensor({2, 3, 4, 5}, 4);
  for (int axis : {2, 3})
    for (bool reverse : {false, true})
      for (bool steady : {false, true}) {
        INFO("axis " << axis << " reverse " << reverse << " steady " << steady);
        const auto report =
            check_gradients([&] { return sum(linear_recurrence(u, a, b, axis, reverse, steady) * r); }, ps);
        CHECK(testutil::worst(report) < 1e-6);
      }
  CHECK_THROWS_AS(linear_recurrence(u, a, b, 1, false), DimensionError);
  CHECK_THROWS_AS(linear_recurrence(u, b, Tensor::zeros({1, 2, 1, 1}), 3, false), DimensionError);
}

TEST_CASE("1-d scan: memoryless case and zero input") {
  ParameterSet ps;
  const SsmParams p = SsmParams::create(Builder{ps, 1}, "ssm", 3);
  set_param(ps, "ssm.a_raw", {0.0, 0.0, 0.0});
  set_param(ps, "ssm.tau", {0.1, -0.2, 0.3, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const Tensor x = random_tensor({1, 3, 1, 6}, 5);
  const Tensor y = ssm_scan_1d(x, p, 0);
  for (int c = 0; c < 3; ++c) {
    const double gain = p.c.values()[c] * p.b.values()[c] + p.d.values()[c];
    for (int t = 0; t < 6; ++t) {
      const double u = x.at(0, c, 0, t) + p.tau.values()[c];
      CHECK(y.at(0, c, 0, t) == doctest::Approx(gain * u).epsilon(1e-5));
    }
  }

  ParameterSet ps2;
  const SsmParams q = SsmParams::create(Builder{ps2, 2}, "ssm", 3);
  const Tensor z = ssm_scan_1d(Tensor::zeros({1, 3, 1, 5}), q, 2);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("steady start keeps constant lines constant") {
  ParameterSet ps;
  const SsmParams p = SsmParams::create(Builder{ps, 9}, "ssm", 2);
  set_param(ps, "ssm.tau", values_of(random_tensor({4, 2, 1, 1}, 10)));
  const Tensor f = Tensor::full({1, 2, 5, 6}, 0.7);
  for (bool steady : {false, true}) {
    const Tensor y = scan_2d(f, p, steady);
    double spread = 0.0;
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 30; ++i) spread = std::max(spread, std::abs(y.at(0, c, i / 6, i % 6) - y.at(0, c, 0, 0)));
    if (steady) {
      CHECK(spread < 1e-5);
    } else {
      CHECK(spread > 1e-3);
    }
  }
  // The first state of a line is the fixed point of its first input.
  const Tensor u = random_tensor({1, 2, 1, 4}, 11);
  const Tensor av = p.a();
  const Tensor h = linear_recurrence(u, av, p.b, 3, false, true);
  for (int c = 0; c < 2; ++c) {
    const double a = av.values()[c], b = p.b.values()[c];
    const double h0 = b * u.at(0, c, 0, 0) / (1 - a);
    CHECK(h.at(0, c, 0, 0) == doctest::Approx(h0).epsilon(1e-5));
    CHECK(h.at(0, c, 0, 1) == doctest::Approx(a * h0 + b * u.at(0, c, 0, 1)).epsilon(1e-5));
  }
}

TEST_CASE("1-d scan against a three-step unroll") {
  ParameterSet ps;
  const SsmParams p = SsmParams::create(Builder{ps, 3}, "ssm", 2);
  set_param(ps, "ssm.tau", {0, 0, 0, 0, 0.25, -0.5, 0, 0});
  const Tensor x = random_tensor({1, 2, 1, 3}, 6);
  const Tensor y = ssm_scan_1d(x, p, 2);
  for (int c = 0; c < 2; ++c) {
    const double a = std::tanh(p.a_raw.values()[c]);
    const double b = p.b.values()[c];
    const double cc = p.c.values()[c];
    const double d = p.d.values()[c];
    const double tau = c == 0 ? 0.25 : -0.5;
    const double u1 = x.at(0, c, 0, 0) + tau;
    const double u2 = x.at(0, c, 0, 1) + tau;
    const double u3 = x.at(0, c, 0, 2) + tau;
    const double h1 = b * u1;
    const double h2 = a * h1 + b * u2;
    const double h3 = a * h2 + b * u3;
    CHECK(y.at(0, c, 0, 0) == doctest::Approx(cc * h1 + d * u1).epsilon(1e-5));
    CHECK(y.at(0, c, 0, 1) == doctest::Approx(cc * h2 + d * u2).epsilon(1e-5));
    CHECK(y.at(0, c, 0, 2) == doctest::Approx(cc * h3 + d * u3).epsilon(1e-5));
  }
}

TEST_CASE("1-d scan output is bounded") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    ParameterSet ps;
    const SsmParams p = SsmParams::create(Builder{ps, s}, "ssm", 4);
    set_param(ps, "ssm.tau", values_of(random_tensor({4, 4, 1, 1}, s + 1000)));
    set_param(ps, "ssm.a_raw", values_of(random_tensor({1, 4, 1, 1}, s + 2000, -4, 4)));
    const int len = 1 + static_cast<int>(s % 12);
    const Tensor x = random_tensor({1, 4, 1, len}, s, -5, 5);
    const int dir = static_cast<int>(s % 4);
    const Tensor y = ssm_scan_1d(x, p, dir);
    double xinf = 0.0;
    for (double v : x.values()) xinf = std::max(xinf, std::abs(v));
    for (int c = 0; c < 4; ++c) {
      const double tinf = std::abs(p.tau.values()[static_cast<std::size_t>(dir * 4 + c)]);
      const double bound = (std::abs(p.c.values()[c] * p.b.values()[c]) * len + std::abs(p.d.values()[c])) *
                           (xinf + tinf);
      for (int t = 0; t < len; ++t) CHECK(std::abs(y.at(0, c, 0, t)) <= bound * (1 + 1e-6));
    }
  }
}

TEST_CASE("2-d scan matches per-direction unrolls") {
  for (auto [h, w] : {std::pair{2, 2}, {3, 4}}) {
    ParameterSet ps;
    const SsmParams p = SsmParams::create(Builder{ps, 7}, "ssm", 2);
    set_param(ps, "ssm.tau", values_of(random_tensor({4, 2, 1, 1}, 8)));
    const Tensor f = random_tensor({2, 2, h, w}, 9);
    std::vector<double> a;
    for (double v : p.a_raw.values()) a.push_back(std::tanh(v));
    const auto b = values_of(p.b), c = values_of(p.c), d = values_of(p.d), tau = values_of(p.tau);
    std::vector<double> mean(f.numel(), 0.0);
    for (int dir = 0; dir < 4; ++dir) {
      const auto expect = direction_oracle(f, a, b, c, d, tau, dir);
      const Tensor got = scan_direction(f, p, static_cast<ScanDirection>(dir));
      for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(got.values()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
        mean[i] += 0.25 * expect[i];
      }
    }
    const Tensor all = scan_2d(f, p);
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(all.values()[i] == doctest::Approx(mean[i]).epsilon(1e-5));
  }
}

TEST_CASE("2-d scan direction symmetry in the memoryless case") {
  ParameterSet ps;
  const SsmParams p = SsmParams::create(Builder{ps, 4}, "ssm", 3);
  set_param(ps, "ssm.a_raw", {0.0, 0.0, 0.0});
  set_param(ps, "ssm.tau", {0.2, 0.1, -0.3, 0.2, 0.1, -0.3, 0.2, 0.1, -0.3, 0.2, 0.1, -0.3});
  const Tensor f = random_tensor({1, 3, 4, 4}, 3);
  const Tensor one = scan_direction(f, p, ScanDirection::kColBackward);
  CHECK(testutil::max_abs_diff(scan_2d(f, p), one) < 1e-6);
}

TEST_CASE("2-d scan flip equivariance and batch permutation") {
  ParameterSet ps;
  const SsmParams p = SsmParams::create(Builder{ps, 12}, "ssm", 3);
  const auto tau = values_of(random_tensor({4, 3, 1, 1}, 13));
  set_param(ps, "ssm.tau", tau);
  const Tensor f = random_tensor({2, 3, 4, 5}, 14);
  const Tensor base = scan_2d(f, p);

  auto swapped = [&](int r0, int r1) {
    std::vector<double> t = tau;
    for (int c = 0; c < 3; ++c) std::swap(t[static_cast<std::size_t>(r0 * 3 + c)], t[static_cast<std::size_t>(r1 * 3 + c)]);
    return t;
  };
  set_param(ps, "ssm.tau", swapped(0, 1));
  CHECK(testutil::max_abs_diff(scan_2d(flip(f, 3), p), flip(base, 3)) < 1e-5);
  set_param(ps, "ssm.tau", swapped(2, 3));
  CHECK(testutil::max_abs_diff(scan_2d(flip(f, 2), p), flip(base, 2)) < 1e-5);
  // Without the swap the flip is not a symmetry.
  set_param(ps, "ssm.tau", tau);
  CHECK(testutil::max_abs_diff(scan_2d(flip(f, 3), p), flip(base, 3)) > 1e-3);

  const Tensor swapped_batch = concat({narrow(f, 0, 1, 1), narrow(f, 0, 0, 1)}, 0);
  const Tensor out = scan_2d(swapped_batch, p);
  CHECK(testutil::max_abs_diff(narrow(out, 0, 0, 1), narrow(base, 0, 1, 1)) == 0.0);
  CHECK(testutil::max_abs_diff(narrow(out, 0, 1, 1), narrow(base, 0, 0, 1)) == 0.0);
}

TEST_CASE("neco forward") {
  ParameterSet ps;
  const Neco neco(Builder{ps, 21}, "neco", 8);
  CHECK(neco(random_tensor({1, 8, 6, 6}, 1)).shape() == Shape{1, 8, 6, 6});

  testutil::fill_params(ps, "bias", 0.0);
  const Tensor z = neco(Tensor::zeros({1, 8, 6, 6}));
  for (double v : z.values()) CHECK(v == 0.0);

  testutil::fill_params(ps, "neco.dw.weight", 1e30);
  testutil::fill_params(ps, "neco.in_proj.weight", 1e30);
  try {
    (void)neco(Tensor::full({1, 8, 6, 6}, 1.0));
    FAIL("expected a non-finite fault");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("neco.local") != std::string::npos);
  }
}

TEST_CASE("neco gradients match finite differences") {
  ParameterSet ps;
  const Neco neco(Builder{ps, 22}, "neco", 4);
  set_param(ps, "neco.ssm.tau", values_of(random_tensor({4, 4, 1, 1}, 5, -0.3, 0.3)));
  const Tensor x = random_tensor({1, 4, 5, 4}, 23);
  const Tensor target = random_tensor({1, 4, 5, 4}, 24);
  const auto report = check_gradients([&] { return mean(square(neco(x) - target)); }, ps, 1e-3, 24);
  for (const auto& e : report) {
    INFO(e.name);
    CHECK(e.max_abs_grad > 0.0);
    CHECK(e.rel_error < 1e-3);
  }
}

TEST_CASE("neighbour selection on a constant image") {
  const Tensor f = Tensor::full({1, 3, 6, 6}, 0.4);
  for (double d : candidate_distances(f, 5)) CHECK(d == 0.0);
  const auto sel = select_neighbors(f, 8, 5);
  for (int i = 0; i < 8; ++i)
    for (int l = 0; l < 36; ++l) CHECK(sel[static_cast<std::size_t>(i * 36 + l)] == i);

  ParameterSet ps;
  const Asc asc(Builder{ps, 3}, "asc", 3);
  Asc::Trace tr;
  (void)asc(f, &tr);
  // Zero differences leave only the projection bias.
  const Tensor& bias = ps.get("asc.csco.bias");
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < 8; ++j)
      for (int l = 0; l < 36; ++l) CHECK(tr.neighbor.at(0, c, j, l) == doctest::Approx(bias.values()[c]).epsilon(1e-6));
}

TEST_CASE("neighbour selection matches a full sort") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor f = random_tensor({2, 3, 6, 6}, 40 + s);
    for (int k : {1, 8, 24}) {
      const auto sel = select_neighbors(f, k, 5);
      for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 6; ++y)
          for (int x = 0; x < 6; ++x) {
            const auto expect = sort_oracle(f, k, 5, n, y, x);
            for (int i = 0; i < k; ++i)
              CHECK(sel[(static_cast<std::size_t>(n) * k + i) * 36 + y * 6 + x] == expect[static_cast<std::size_t>(i)]);
          }
    }
  }
  const Tensor f = random_tensor({1, 2, 5, 5}, 1);
  CHECK_THROWS_AS(select_neighbors(f, 25, 5), DimensionError);
  CHECK_THROWS_AS(select_neighbors(f, 0, 5), DimensionError);
  CHECK_THROWS_AS(select_neighbors(f, 3, 4), DimensionError);
  ParameterSet ps;
  CHECK_THROWS_AS(Asc(Builder{ps, 1}, "asc", 2, 25, 5), DimensionError);
}

TEST_CASE("candidate distances are normalized per pixel") {
  const Tensor f = random_tensor({1, 4, 5, 6}, 77);
  const auto d = candidate_distances(f, 5);
  for (int l = 0; l < 30; ++l) {
    double mx = 0.0;
    for (int j = 0; j < 25; ++j) {
      const double v = d[static_cast<std::size_t>(j * 30 + l)];
      CHECK(v >= 0.0);
      mx = std::max(mx, v);
    }
    CHECK(d[static_cast<std::size_t>(12 * 30 + l)] == 0.0);
    CHECK(mx == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("asc forward") {
  ParameterSet ps;
  const Asc asc(Builder{ps, 5}, "asc", 4);
  const Tensor f = random_tensor({2, 4, 6, 5}, 6, -3, 3);
  Asc::Trace tr;
  const Tensor out = asc(f, &tr);
  CHECK(out.shape() == f.shape());
  CHECK(tr.cluster.shape() == Shape{2, 4, 8, 30});
  for (double v : tr.cluster.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(tr.selection == select_neighbors(f, 8, 5));
  CHECK(testutil::max_abs_diff(asc(f), out) == 0.0);
}

TEST_CASE("asc gradients with the selection held fixed") {
  ParameterSet ps;
  const Asc asc(Builder{ps, 8}, "asc", 3);
  // The input is checked too: its gradient flows through unfold and gather.
  const Tensor x = ps.add("input", random_tensor({1, 3, 5, 5}, 9));
  const Tensor target = random_tensor({1, 3, 5, 5}, 10);
  const auto report = check_gradients([&] { return mean(square(asc(x) - target)); }, ps, 1e-3, 24);
  for (const auto& e : report) {
    INFO(e.name);
    CHECK(e.max_abs_grad > 0.0);
    CHECK(e.rel_error < 1e-3);
  }
}
