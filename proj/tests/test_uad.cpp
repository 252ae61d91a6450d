// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "dimlight/uad.hpp"
#include "test_util.hpp"

using namespace dimlight;
using testutil::random_tensor;

TEST_CASE("entropy map reference values") {
  const Tensor uniform = Tensor::full({1, 4, 3, 3}, 0.3);
  const Tensor hu = entropy_map(uniform);
  CHECK(hu.shape() == Shape{1, 1, 3, 3});
  for (double v : hu.values()) CHECK(std::abs(v - 1.0) <= 1e-5);

  std::vector<double> onehot(4 * 9, 0.0);
  for (int i = 0; i < 9; ++i) onehot[static_cast<std::size_t>(2 * 9 + i)] = 100.0;
  const Tensor ho = entropy_map(Tensor::from({1, 4, 3, 3}, onehot));
  for (double v : ho.values()) CHECK(v < 1e-3);

  const Tensor two = Tensor::from({1, 2, 1, 1}, {std::log(9.0), 0.0});
  const double expect = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0);
  CHECK(entropy_map(two).item() == doctest::Approx(expect).epsilon(1e-5));
  CHECK(expect == doctest::Approx(0.4690).epsilon(1e-4));

  CHECK_THROWS_AS(entropy_map(Tensor::zeros({1, 1, 2, 2})), DimensionError);
}

TEST_CASE("entropy map stays in [0,1]") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const int c = 2 + static_cast<int>(s % 7);
    const Tensor f = random_tensor({1, c, 3, 4}, s, -20.0, 20.0);
    const Tensor h = entropy_map(f);
    for (double v : h.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("spatial branch") {
  ParameterSet ps;
  const SpatialBranch sb(Builder{ps, 1}, "sb", 8);
  const Tensor x = random_tensor({1, 8, 6, 6}, 2);
  CHECK(sb(x).shape() == Shape{1, 8, 6, 6});

  const Tensor w = sb.weights(x);
  for (int y = 0; y < 6; ++y)
    for (int z = 0; z < 6; ++z) {
      double acc = 0.0;
      for (int c = 0; c < 8; ++c) acc += w.at(0, c, y, z);
      CHECK(std::abs(acc - 1.0) <= 1e-6);
    }

  testutil::fill_params(ps, "bias", 0.0);
  const Tensor z = sb(Tensor::zeros({1, 8, 6, 6}));
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("attention with one token returns the projected value") {
  ParameterSet ps;
  const CrossAttention attn(Builder{ps, 3}, "attn", 4, 4, 2, 3);
  const Tensor q = random_tensor({1, 4, 1, 1}, 1);
  const Tensor k = random_tensor({1, 4, 1, 1}, 2);
  const Tensor v = random_tensor({1, 2, 1, 1}, 3);
  CHECK(testutil::max_abs_diff(attn(q, k, v), attn.value()(v)) < 1e-7);
}

TEST_CASE("attention with identical keys averages the values") {
  ParameterSet ps;
  const CrossAttention attn(Builder{ps, 3}, "attn", 4, 4, 2, 3);
  const Tensor q = random_tensor({1, 4, 2, 3}, 1);
  const Tensor k = Tensor::full({1, 4, 2, 3}, 0.4);
  const Tensor v = random_tensor({1, 2, 2, 3}, 3);
  const Tensor pv = attn.value()(v);
  const Tensor out = attn(q, k, v);
  for (int d = 0; d < 3; ++d) {
    double m = 0.0;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) m += pv.at(0, d, y, x);
    m /= 6.0;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) CHECK(out.at(0, d, y, x) == doctest::Approx(m).epsilon(1e-6));
  }
}

TEST_CASE("two-token attention against a hand computation") {
  ParameterSet ps;
  const CrossAttention attn(Builder{ps, 4}, "attn", 2, 2, 2, 2);
  const Tensor q = random_tensor({1, 2, 1, 2}, 5);
  const Tensor k = random_tensor({1, 2, 1, 2}, 6);
  const Tensor v = random_tensor({1, 2, 1, 2}, 7);
  auto proj = [&](const std::string& n, const Tensor& x, int d, int t) {
    const Tensor& w = ps.get("attn." + n + ".weight");
    const double b = n == "k" ? 0.0 : ps.get("attn." + n + ".bias").at(0, d, 0, 0);
    return w.at(d, 0, 0, 0) * x.at(0, 0, 0, t) + w.at(d, 1, 0, 0) * x.at(0, 1, 0, t) + b;
  };
  const Tensor out = attn(q, k, v);
  for (int t = 0; t < 2; ++t) {
    double logits[2];
    for (int s = 0; s < 2; ++s) {
      logits[s] = (proj("q", q, 0, t) * proj("k", k, 0, s) + proj("q", q, 1, t) * proj("k", k, 1, s)) /
                  std::sqrt(2.0);
    }
    const double a0 = 1.0 / (1.0 + std::exp(logits[1] - logits[0]));
    for (int d = 0; d < 2; ++d) {
      const double expect = a0 * proj("v", v, d, 0) + (1.0 - a0) * proj("v", v, d, 1);
      CHECK(out.at(0, d, 0, t) == doctest::Approx(expect).epsilon(1e-5));
    }
  }
}

TEST_CASE("attention output lies within the value rows' bounds") {
  ParameterSet ps;
  const CrossAttention attn(Builder{ps, 8}, "attn", 3, 3, 3, 4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor q = random_tensor({1, 3, 3, 3}, s, -3, 3);
    const Tensor k = random_tensor({1, 3, 3, 3}, s + 100, -3, 3);
    const Tensor v = random_tensor({1, 3, 3, 3}, s + 200);
    const Tensor pv = attn.value()(v);
    const Tensor out = attn(q, k, v);
    const Tensor w = attn.weights(q, k);
    for (int t = 0; t < 9; ++t) {
      double row = 0.0;
      for (int j = 0; j < 9; ++j) row += w.at(0, 0, t, j);
      CHECK(std::abs(row - 1.0) < 1e-6);
    }
    for (int d = 0; d < 4; ++d) {
      double lo = 1e9, hi = -1e9;
      for (int t = 0; t < 9; ++t) {
        lo = std::min(lo, pv.at(0, d, t / 3, t % 3));
        hi = std::max(hi, pv.at(0, d, t / 3, t % 3));
      }
      for (int t = 0; t < 9; ++t) {
        CHECK(out.at(0, d, t / 3, t % 3) >= lo - 1e-6);
        CHECK(out.at(0, d, t / 3, t % 3) <= hi + 1e-6);
      }
    }
  }
  CHECK_THROWS_AS(attn(random_tensor({1, 3, 2, 2}, 1), random_tensor({1, 3, 3, 3}, 1),
                       random_tensor({1, 3, 3, 3}, 1)),
                  DimensionError);
}

TEST_CASE("uad forward") {
  ParameterSet ps;
  const Uad uad(Builder{ps, 11}, "uad", 8, UadOptions{4});
  const Tensor x = random_tensor({2, 8, 4, 4}, 12);
  const Tensor y1 = uad(x);
  const Tensor y2 = uad(x);
  CHECK(y1.shape() == x.shape());
  CHECK(std::equal(y1.values().begin(), y1.values().end(), y2.values().begin()));

  // Training mode draws a dropout mask from the pass seed.
  const Tensor t1 = uad(x, RunMode{true, 5});
  const Tensor t2 = uad(x, RunMode{true, 5});
  const Tensor t3 = uad(x, RunMode{true, 6});
  CHECK(testutil::max_abs_diff(t1, t2) == 0.0);
  CHECK(testutil::max_abs_diff(t1, t3) > 0.0);
}

TEST_CASE("zero entropy embedding decouples the frequency branch from entropy") {
  ParameterSet ps;
  Uad uad(Builder{ps, 11}, "uad", 6, UadOptions{4});
  const Tensor x = random_tensor({1, 6, 4, 4}, 12);
  Uad::Trace a, b;
  (void)uad(x, {}, &a);
  uad.set_entropy_scale(0.3);
  (void)uad(x, {}, &b);
  CHECK(testutil::max_abs_diff(a.f_fre, b.f_fre) > 0.0);

  testutil::fill_params(ps, "entropy_embed", 0.0);
  (void)uad(x, {}, &a);
  uad.set_entropy_scale(1.0);
  (void)uad(x, {}, &b);
  CHECK(testutil::max_abs_diff(a.f_fre, b.f_fre) == 0.0);
}

TEST_CASE("uad gradients match finite differences") {
  ParameterSet ps;
  const Uad uad(Builder{ps, 21}, "uad", 4, UadOptions{3});
  const Tensor x = random_tensor({1, 4, 4, 4}, 22);
  const Tensor target = random_tensor({1, 4, 4, 4}, 23);
  const auto report = check_gradients([&] { return mean(square(uad(x) - target)); }, ps, 1e-3, 24);
  for (const auto& e : report) {
    INFO(e.name);
    CHECK(e.max_abs_grad > 0.0);
    CHECK(e.rel_error < 1e-3);
  }
}

TEST_CASE("entropy gradient diagnostic") {
  ParameterSet ps;
  Uad uad(Builder{ps, 31}, "uad", 8, UadOptions{4});
  const Tensor x = random_tensor({1, 8, 4, 4}, 32);
  const Tensor target = random_tensor({1, 8, 4, 4}, 33);

  const auto one = entropy_gradient_diagnostic(uad, ps, x, target, 1.0);
  CHECK(one.ratio() == 1.0);
  CHECK(one.value_ratio() == 1.0);

  const auto zero = entropy_gradient_diagnostic(uad, ps, x, target, 0.0);
  CHECK(zero.value_norm_scaled == 0.0);
  CHECK(zero.value_norm_reference > 0.0);

  for (double s : {0.5, 2.0}) {
    const auto d = entropy_gradient_diagnostic(uad, ps, x, target, s);
    INFO("scale " << s << " value ratio " << d.value_ratio());
    CHECK(std::abs(d.value_ratio() - s) <= 0.05 * s);
  }
  CHECK(uad.entropy_scale() == 1.0);
}
