// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dimlight/g2af.hpp"
#include "test_util.hpp"

using namespace dimlight;
using testutil::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b[i]));
  return m;
}

double energy(const Tensor& t) {
  double e = 0.0;
  for (double v : t.values()) e += v * v;
  return e;
}

}  // namespace

TEST_CASE("distance grid") {
  const Tensor g3 = make_dist_grid(3, 3);
  CHECK(g3.at(0, 0, 1, 1) == 0.0);
  CHECK(g3.at(0, 0, 0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-7));
  CHECK(g3.at(0, 0, 2, 2) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-7));

  const Tensor g4 = make_dist_grid(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double dx = -1.0 + 2.0 * y / 3.0;
      const double dy = -1.0 + 2.0 * x / 3.0;
      CHECK(g4.at(0, 0, y, x) == doctest::Approx(std::sqrt(dx * dx + dy * dy)).epsilon(1e-6));
    }

  for (auto [h, w] : {std::pair{5, 7}, {4, 6}, {1, 3}}) {
    const Tensor g = make_dist_grid(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) CHECK(g.at(0, 0, y, x) == g.at(0, 0, h - 1 - y, w - 1 - x));
  }
  const Tensor g57 = make_dist_grid(5, 7);
  double mn = 10.0;
  for (double v : g57.values()) mn = std::min(mn, v);
  CHECK(g57.at(0, 0, 2, 3) == mn);
}

TEST_CASE("adaptive radius") {
  const Tensor r = Tensor::scalar(0.3);
  const ComplexTensor zero{Tensor::zeros({2, 3, 4, 4}), Tensor::zeros({2, 3, 4, 4})};
  const Tensor r0 = adaptive_radius(zero, r);
  CHECK(r0.shape() == Shape{2, 1, 1, 1});
  CHECK(r0.values()[0] == doctest::Approx(0.15).epsilon(1e-6));

  const ComplexTensor big{Tensor::full({1, 2, 4, 4}, 1e4), Tensor::zeros({1, 2, 4, 4})};
  CHECK(adaptive_radius(big, r).item() == doctest::Approx(0.3).epsilon(1e-6));

  const ComplexTensor z{random_tensor({1, 2, 4, 4}, 1, -3, 3), random_tensor({1, 2, 4, 4}, 2, -3, 3)};
  double acc = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    const double m = std::hypot(z.re.values()[i], z.im.values()[i]);
    acc += 1.0 / (1.0 + std::exp(-m));
  }
  const double got = adaptive_radius(z, r).item();
  CHECK(got == doctest::Approx(0.3 * acc / 32.0).epsilon(1e-6));
  CHECK(got > 0.0);
  CHECK(got < 0.3);
}

TEST_CASE("gaussian masks") {
  const Tensor pt = Tensor::from({1, 1, 1, 2}, {0.0, 0.3});
  const Tensor m = gaussian_mask(pt, Tensor::scalar(0.3));
  CHECK(m.values()[0] == 1.0);
  CHECK(m.values()[1] == doctest::Approx(std::exp(-0.5)).epsilon(1e-5));

  const Tensor g = make_dist_grid(7, 7);
  const Tensor degenerate = gaussian_mask(g, Tensor::scalar(0.0));
  CHECK(degenerate.at(0, 0, 3, 3) == 1.0);
  CHECK(degenerate.at(0, 0, 3, 4) < 1e-30);

  // Non-increasing outward from the center along every row and column.
  for (double r : {0.05, 0.1, 0.3, 1.0}) {
    const Tensor mk = gaussian_mask(g, Tensor::scalar(r));
    for (int i = 0; i < 7; ++i)
      for (int t = 3; t < 6; ++t) {
        CHECK(mk.at(0, 0, i, t + 1) <= mk.at(0, 0, i, t));
        CHECK(mk.at(0, 0, i, 6 - t - 1) <= mk.at(0, 0, i, 6 - t));
        CHECK(mk.at(0, 0, t + 1, i) <= mk.at(0, 0, t, i));
        CHECK(mk.at(0, 0, 6 - t - 1, i) <= mk.at(0, 0, 6 - t, i));
      }
    // exp(-400) at r = 0.05 underflows float32.
    for (double v : mk.values()) {
      CHECK((r < 0.1 || v > 0.0));
      CHECK(v <= 1.0);
    }
  }

  const Tensor lo = gaussian_mask(g, Tensor::scalar(0.3));
  const Tensor hi = gaussian_mask(g, Tensor::scalar(0.1));
  for (std::size_t i = 0; i < lo.numel(); ++i) CHECK(lo.values()[i] >= hi.values()[i]);
}

TEST_CASE("band decomposition matches the brute-force DFT oracle") {
  for (auto [h, w] : {std::pair{4, 4}, {5, 7}, {6, 3}}) {
    ParameterSet ps;
    const G2af g(Builder{ps, 3}, "g2af", 3);
    const Tensor x = random_tensor({2, 3, h, w}, static_cast<std::uint64_t>(h * 10 + w));
    const ComplexTensor spec = fft2(x);
    const G2af::Masks m = g.masks(spec, h, w);
    const std::vector<double> low = testutil::band_oracle(x, m.low);
    const std::vector<double> high = testutil::band_oracle(x, m.high);
    std::vector<double> expect(low.size());
    for (std::size_t i = 0; i < low.size(); ++i) expect[i] = 0.5 * low[i] + 0.5 * high[i];
    CHECK(max_abs_diff(masked_band(spec, m.low), low) < 1e-4);
    CHECK(max_abs_diff(g.bands(x), expect) < 1e-4);
  }
}

TEST_CASE("constant image keeps only the DC term") {
  ParameterSet ps;
  const G2af g(Builder{ps, 5}, "g2af", 2);
  const Tensor x = Tensor::full({1, 2, 5, 5}, 0.7);
  const Tensor b = g.bands(x);
  for (double v : b.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-5));
}

TEST_CASE("identity masks reproduce the input") {
  ParameterSet ps;
  G2af g(Builder{ps, 5}, "g2af", 3);
  g.set_radius_override(1e8);
  const Tensor x = random_tensor({1, 3, 6, 5}, 9);
  CHECK(testutil::max_abs_diff(g.bands(x), x) < 1e-5);
}

TEST_CASE("complementary high mask") {
  ParameterSet ps;
  G2afOptions o;
  o.complementary_high_mask = true;
  const G2af g(Builder{ps, 5}, "g2af", 2, o);
  const Tensor x = random_tensor({1, 2, 5, 5}, 4);
  const G2af::Masks m = g.masks(fft2(x), 5, 5);
  CHECK(m.high.at(0, 0, 2, 2) == 0.0);
  CHECK(m.high.at(0, 0, 0, 0) > 0.9);
}

TEST_CASE("band energy never exceeds the input energy") {
  ParameterSet ps;
  const G2af g(Builder{ps, 5}, "g2af", 3);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor x = random_tensor({1, 3, 8, 7}, 50 + s);
    const ComplexTensor spec = fft2(x);
    const G2af::Masks m = g.masks(spec, 8, 7);
    const double ex = energy(x);
    CHECK(energy(masked_band(spec, m.low)) <= ex * (1.0 + 1e-4));
    CHECK(energy(masked_band(spec, m.high)) <= ex * (1.0 + 1e-4));
    const double es = energy(spec.re) + energy(spec.im);
    const ComplexTensor ml{spec.re * m.low, spec.im * m.low};
    CHECK(energy(ml.re) + energy(ml.im) <= es * (1.0 + 1e-4));
    // Parseval: spectral energy is H*W times the spatial energy.
    CHECK(es == doctest::Approx(ex * 56.0).epsilon(1e-4));
  }
}

TEST_CASE("g2af forward preserves shape") {
  ParameterSet ps;
  const G2af g(Builder{ps, 5}, "g2af", 4);
  CHECK(g(random_tensor({2, 4, 6, 6}, 1)).shape() == Shape{2, 4, 6, 6});
  CHECK(ps.get("g2af.r_low").item() == doctest::Approx(0.3));
  CHECK(ps.get("g2af.r_high").item() == doctest::Approx(0.1));
}

TEST_CASE("g2af gradients, including the radii through the FFT") {
  ParameterSet ps;
  const G2af g(Builder{ps, 8}, "g2af", 3);
  const Tensor x = random_tensor({1, 3, 8, 6}, 2);
  const Tensor target = random_tensor({1, 3, 8, 6}, 3);
  const auto report = check_gradients([&] { return mean(square(g(x) - target)); }, ps);
  for (const auto& e : report) {
    INFO(e.name);
    CHECK(e.max_abs_grad > 0.0);
    CHECK(e.rel_error < 1e-3);
  }
}
