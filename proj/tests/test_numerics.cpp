// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <complex>
#include <functional>

#include "dimlight/layers.hpp"
#include "test_util.hpp"

using namespace dimlight;
using testutil::random_tensor;

TEST_CASE("conv2d identity and bias cases") {
  const Tensor x = random_tensor({1, 3, 5, 5}, 1);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tensor w = Tensor::from({3, 3, 1, 1}, eye);
  const Tensor y = conv2d(x, w, Tensor::zeros({1, 3, 1, 1}), {});
  CHECK(testutil::max_abs_diff(x, y) == 0.0);

  const Tensor zeros = Tensor::zeros({1, 3, 5, 5});
  const Tensor k = random_tensor({2, 3, 3, 3}, 2);
  const Tensor b = Tensor::from({1, 2, 1, 1}, {0.25, -1.5});
  for (PadMode mode : {PadMode::kZeros, PadMode::kReflect}) {
    const Tensor out = conv2d(zeros, k, b, {1, 1, 1, 1, mode});
    for (int c = 0; c < 2; ++c)
      for (int h = 0; h < 5; ++h)
        for (int q = 0; q < 5; ++q) CHECK(out.at(0, c, h, q) == b.values()[c]);
  }
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  struct Case {
    Shape x;
    Shape w;
    int stride;
    int pad;
    int groups;
  };
  const Case cases[] = {
      {{1, 3, 5, 5}, {4, 3, 3, 3}, 1, 1, 1}, {{2, 4, 7, 6}, {4, 1, 3, 3}, 1, 1, 4},
      {{1, 4, 8, 8}, {6, 2, 3, 3}, 2, 1, 2}, {{1, 2, 6, 5}, {3, 2, 1, 1}, 1, 0, 1},
      {{1, 3, 5, 5}, {2, 3, 5, 5}, 1, 2, 1},
  };
  std::uint64_t seed = 10;
  for (const Case& c : cases) {
    const Tensor x = random_tensor(c.x, seed++);
    const Tensor w = random_tensor(c.w, seed++);
    const auto bias = testutil::random_values(c.w.n, seed++);
    const ConvOptions opts{c.stride, c.pad, c.pad, c.groups, PadMode::kZeros};
    const Tensor y = conv2d(x, w, Tensor::from({1, c.w.n, 1, 1}, bias), opts);
    const auto expect = testutil::conv_oracle(x, w, bias, c.stride, c.pad, c.groups);
    REQUIRE(y.numel() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
  }

  // Rectangular 3x1 kernel with height padding only.
  const Tensor x = random_tensor({1, 2, 9, 3}, 77);
  const Tensor w = random_tensor({2, 2, 3, 1}, 78);
  const Tensor y = conv2d(x, w, Tensor(), {1, 1, 0, 1, PadMode::kZeros});
  CHECK(y.shape() == Shape{1, 2, 9, 3});
  for (int oc = 0; oc < 2; ++oc)
    for (int h = 0; h < 9; ++h)
      for (int q = 0; q < 3; ++q) {
        double acc = 0.0;
        for (int ic = 0; ic < 2; ++ic)
          for (int t = 0; t < 3; ++t) {
            const int r = h + t - 1;
            if (r >= 0 && r < 9) acc += w.at(oc, ic, t, 0) * x.at(0, ic, r, q);
          }
        CHECK(std::abs(y.at(0, oc, h, q) - acc) < 1e-5);
      }
}

TEST_CASE("conv2d rejects incompatible weights") {
  const Tensor x = Tensor::zeros({1, 3, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 2, 3, 3}), Tensor(), {}), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 1, 3, 3}), Tensor(), {1, 1, 1, 2}), DimensionError);
}

TEST_CASE("reflect padding keeps constant images constant") {
  const Tensor x = Tensor::full({1, 2, 6, 5}, 0.7);
  const Tensor w = random_tensor({3, 2, 3, 3}, 3);
  const Tensor y = conv2d(x, w, Tensor(), {1, 1, 1, 1, PadMode::kReflect});
  for (int c = 0; c < 3; ++c)
    for (int h = 0; h < 6; ++h)
      for (int q = 0; q < 5; ++q) CHECK(y.at(0, c, h, q) == y.at(0, c, 0, 0));
}

TEST_CASE("linear cases") {
  const Tensor x = random_tensor({1, 2, 3, 3}, 4);
  const Tensor eye = Tensor::from({2, 2, 1, 1}, {1, 0, 0, 1});
  CHECK(testutil::max_abs_diff(linear(x, eye, Tensor()), x) == 0.0);
  const Tensor b = Tensor::from({1, 2, 1, 1}, {0.5, -0.25});
  const Tensor y0 = linear(x, Tensor::zeros({2, 2, 1, 1}), b);
  for (int h = 0; h < 3; ++h) {
    CHECK(y0.at(0, 0, h, 1) == 0.5);
    CHECK(y0.at(0, 1, h, 2) == -0.25);
  }
  // [1 2; 3 4] * (x0, x1)^T by hand.
  const Tensor px = Tensor::from({1, 2, 1, 1}, {0.5, -1.0});
  const Tensor y = linear(px, Tensor::from({2, 2, 1, 1}, {1, 2, 3, 4}), Tensor());
  CHECK(y.values()[0] == doctest::Approx(1 * 0.5 + 2 * -1.0));
  CHECK(y.values()[1] == doctest::Approx(3 * 0.5 + 4 * -1.0));
  CHECK_THROWS_AS(linear(x, Tensor::zeros({2, 3, 1, 1}), Tensor()), DimensionError);
}

TEST_CASE("activation values") {
  const Tensor u = Tensor::full({1, 4, 1, 1}, 0.3);
  const Tensor s = softmax(u, 1);
  for (double v : s.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(leaky_relu(Tensor::scalar(-1.0), 0.2).item() == doctest::Approx(-0.2).epsilon(1e-7));
  CHECK(kLeakySlope == 0.2);

  const Tensor r = random_tensor({2, 5, 3, 4}, 5, -30, 30);
  for (int axis = 0; axis < 4; ++axis) {
    const Tensor sm = softmax(r, axis);
    const Tensor total = sum_axis(sm, axis);
    for (double v : total.values()) CHECK(std::abs(v - 1.0) <= 1e-6);
  }
  const Tensor sg = sigmoid(r);
  for (double v : sg.values()) CHECK((v > 0.0 && v <= 1.0));
  for (auto f : {relu, silu, tanh}) {
    const Tensor y = f(r);
    for (double v : y.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("reductions and shape ops") {
  const Tensor c = Tensor::full({1, 2, 4, 4}, 0.4);
  const Tensor u = unfold(c, 3);
  CHECK(u.shape() == Shape{1, 2, 9, 16});
  for (double v : u.values()) CHECK(v == doctest::Approx(0.4));
  CHECK_THROWS_AS(unfold(c, 4), DimensionError);

  // Center candidate reproduces the input.
  const Tensor r = random_tensor({1, 2, 4, 5}, 6);
  const Tensor ur = unfold(r, 5);
  for (int ch = 0; ch < 2; ++ch)
    for (int p = 0; p < 20; ++p) CHECK(ur.at(0, ch, 12, p) == r.at(0, ch, p / 5, p % 5));

  const int n = 12;
  std::vector<double> ramp(n);
  for (int i = 0; i < n; ++i) ramp[i] = i + 1;
  const Tensor g = avg_pool_global(Tensor::from({1, 1, 3, 4}, ramp));
  CHECK(g.item() == doctest::Approx((n + 1) / 2.0));

  const Tensor a = Tensor::zeros({2, 3, 4, 5});
  const Tensor b = Tensor::zeros({2, 1, 4, 5});
  CHECK(concat({a, b, a}, 1).shape() == Shape{2, 7, 4, 5});
  CHECK(concat({a, a}, 3).shape() == Shape{2, 3, 4, 10});

  const Tensor t = random_tensor({2, 3, 4, 5}, 7);
  const Tensor parts = concat({narrow(t, 2, 0, 1), narrow(t, 2, 1, 3)}, 2);
  CHECK(testutil::max_abs_diff(parts, t) == 0.0);
  CHECK(testutil::max_abs_diff(transpose(transpose(t, 1, 3), 1, 3), t) == 0.0);
  CHECK(transpose(t, 2, 3).at(1, 2, 4, 3) == t.at(1, 2, 3, 4));
  CHECK(testutil::max_abs_diff(flip(flip(t, 3), 3), t) == 0.0);
  const Tensor up = upsample_nearest2x(t);
  CHECK(up.at(1, 1, 7, 9) == t.at(1, 1, 3, 4));
}

TEST_CASE("fft2/ifft2 roundtrip and oracle") {
  const Tensor x = random_tensor({1, 2, 8, 8}, 8);
  double imag = 1.0;
  const Tensor back = ifft2(fft2(x), &imag);
  CHECK(testutil::max_abs_diff(x, back) < 1e-4);
  CHECK(imag < 1e-4);

  // All shapes up to 16x16, odd extents included.
  for (int h = 1; h <= 16; ++h)
    for (int w = 1; w <= 16; ++w) {
      const Tensor r = random_tensor({1, 1, h, w}, 100 + h * 17 + w);
      CHECK(testutil::max_abs_diff(ifft2(fft2(r)), r) < 1e-4);
    }

  // Constant image: only the centered DC bin is nonzero.
  for (auto [h, w] : {std::pair{4, 4}, std::pair{5, 7}}) {
    const ComplexTensor z = fft2(Tensor::full({1, 1, h, w}, 0.5));
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v) {
        const double mag = std::hypot(z.re.at(0, 0, u, v), z.im.at(0, 0, u, v));
        if (u == h / 2 && v == w / 2) {
          CHECK(mag == doctest::Approx(0.5 * h * w));
        } else {
          CHECK(mag < 1e-5);
        }
      }
  }

  // 4x4 and 5x3 against the direct DFT sum.
  for (auto [h, w] : {std::pair{4, 4}, std::pair{5, 3}}) {
    const Tensor r = random_tensor({1, 1, h, w}, 9 + h);
    std::vector<std::complex<double>> a(r.values().begin(), r.values().end());
    const auto ref = testutil::dft2_oracle(a, h, w, false);
    const ComplexTensor z = fft2(r);
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v) {
        const auto e = ref[static_cast<std::size_t>(u) * w + v];
        const int su = (u + h / 2) % h;
        const int sv = (v + w / 2) % w;
        CHECK(std::abs(z.re.at(0, 0, su, sv) - e.real()) < 1e-4);
        CHECK(std::abs(z.im.at(0, 0, su, sv) - e.imag()) < 1e-4);
      }
  }
}

TEST_CASE("dropout modes") {
  const Tensor x = random_tensor({1, 3, 6, 6}, 11);
  CHECK(testutil::max_abs_diff(dropout(x, 0.0, 1, true), x) == 0.0);
  CHECK(testutil::max_abs_diff(dropout(x, 0.5, 1, false), x) == 0.0);
  const Tensor a = dropout(x, 0.3, 42, true);
  const Tensor b = dropout(x, 0.3, 42, true);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  int zeros = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.values()[i] == 0.0) {
      ++zeros;
    } else {
      CHECK(a.values()[i] == doctest::Approx(x.values()[i] / 0.7).epsilon(1e-6));
    }
  }
  CHECK(zeros > 0);
  CHECK_THROWS_AS(dropout(x, 1.0, 1, true), NumericsError);
}

TEST_CASE("backward basics") {
  ParameterSet ps;
  const Tensor x = ps.add("x", random_tensor({1, 2, 3, 3}, 12));
  const Tensor unused = ps.add("unused", Tensor::zeros({1, 1, 1, 2}));
  {
    const Gradients g = backward(sum(x), ps);
    for (double v : g.at("x").values()) CHECK(v == 1.0);
    for (double v : g.at("unused").values()) CHECK(v == 0.0);
  }
  {
    const Gradients g = backward(scale(sum(square(x)), 0.5), ps);
    CHECK(testutil::max_abs_diff(g.at("x"), x) < 1e-12);
  }
  CHECK_THROWS_AS(backward(sum(Tensor::zeros({1, 1, 2, 2})), ps), NumericsError);
  CHECK_THROWS_AS(backward(x, ps), DimensionError);
}

TEST_CASE("fd_gradient oracle cases") {
  const Tensor theta = random_tensor({1, 2, 2, 3}, 13);
  const Tensor ones = fd_gradient([](const Tensor& t) { return sum(t).item(); }, theta);
  for (double v : ones.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  const Tensor half_sq =
      fd_gradient([](const Tensor& t) { return 0.5 * sum(square(t)).item(); }, theta);
  CHECK(testutil::max_abs_diff(half_sq, theta) < 1e-4);

  int calls = 0;
  CHECK_THROWS_AS(fd_gradient([&](const Tensor& t) { return sum(t).item() + (calls++); }, theta),
                  NumericsError);
}

TEST_CASE("conv -> silu -> pool chain agrees with finite differences") {
  ParameterSet ps;
  Builder b{ps, 5};
  const Conv2d conv(b, "conv", 3, 4, 3);
  const Tensor x = random_tensor({2, 3, 6, 6}, 14);
  const Tensor proj = random_tensor({2, 4, 1, 1}, 15);
  auto loss = [&] { return sum(avg_pool_global(silu(conv(x))) * proj); };
  const auto report = check_gradients(loss, ps, 1e-3, 1000);
  CHECK(testutil::worst(report) < 1e-3);
}

namespace {

// Gradient of sum(op(x) * R) w.r.t. x, analytic vs finite differences.
double op_grad_error(const std::function<Tensor(const Tensor&)>& op, Shape s, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  ParameterSet ps;
  const Tensor x = ps.add("x", random_tensor(s, seed, lo, hi));
  const Tensor probe = op(x);
  const Tensor r = random_tensor(probe.shape(), seed + 1);
  return testutil::worst(check_gradients([&] { return sum(op(x) * r); }, ps, 1e-6, 4096));
}

}  // namespace

TEST_CASE("every differentiable op matches finite differences") {
  const Shape s{2, 4, 8, 8};
  const Tensor other = random_tensor(s, 99);
  const Tensor chan = random_tensor({1, 4, 1, 1}, 98, 0.5, 2.0);
  const Tensor w3 = random_tensor({4, 2, 3, 3}, 97);
  const Tensor wg = random_tensor({4, 1, 3, 3}, 96);
  const Tensor b4 = random_tensor({1, 4, 1, 1}, 95);
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> ops = {
      {"neg", [](const Tensor& x) { return neg(x); }},
      {"exp", [](const Tensor& x) { return exp(x); }},
      {"square", [](const Tensor& x) { return square(x); }},
      {"relu", [](const Tensor& x) { return relu(x); }},
      {"leaky_relu", [](const Tensor& x) { return leaky_relu(x); }},
      {"sigmoid", [](const Tensor& x) { return sigmoid(x); }},
      {"silu", [](const Tensor& x) { return silu(x); }},
      {"tanh", [](const Tensor& x) { return tanh(x); }},
      {"abs", [](const Tensor& x) { return abs(x); }},
      {"clamp", [](const Tensor& x) { return clamp(x, -0.5, 0.5); }},
      {"add", [&](const Tensor& x) { return x + other; }},
      {"sub_bcast", [&](const Tensor& x) { return chan - x; }},
      {"mul_bcast", [&](const Tensor& x) { return x * chan; }},
      {"div_bcast", [&](const Tensor& x) { return x / chan; }},
      {"div_den", [&](const Tensor& x) { return other / add_scalar(square(x), 1.0); }},
      {"sum_axis1", [](const Tensor& x) { return sum_axis(x, 1); }},
      {"mean_axis3", [](const Tensor& x) { return mean_axis(x, 3); }},
      {"avg_pool_global", [](const Tensor& x) { return avg_pool_global(x); }},
      {"avg_pool3", [](const Tensor& x) { return avg_pool(x, 3); }},
      {"concat", [&](const Tensor& x) { return concat({x, other, x}, 1); }},
      {"narrow", [](const Tensor& x) { return narrow(x, 2, 2, 5); }},
      {"transpose", [](const Tensor& x) { return transpose(x, 1, 2); }},
      {"reshape", [](const Tensor& x) { return reshape(x, {4, 2, 16, 4}); }},
      {"flip", [](const Tensor& x) { return flip(x, 3); }},
      {"upsample", [](const Tensor& x) { return upsample_nearest2x(x); }},
      {"expand", [](const Tensor& x) { return expand(mean_axis(x, 2), 2, 3); }},
      {"softmax1", [](const Tensor& x) { return softmax(x, 1); }},
      {"softmax3", [](const Tensor& x) { return softmax(x, 3); }},
      {"matmul", [&](const Tensor& x) { return matmul(x, transpose(other, 2, 3)); }},
      {"conv_reflect", [&](const Tensor& x) {
         return conv2d(narrow(x, 1, 0, 2), w3, b4, {1, 1, 1, 1, PadMode::kReflect});
       }},
      {"conv_stride2", [&](const Tensor& x) {
         return conv2d(narrow(x, 1, 0, 2), w3, b4, {2, 1, 1, 1, PadMode::kZeros});
       }},
      {"conv_depthwise", [&](const Tensor& x) {
         return conv2d(x, wg, Tensor(), {1, 1, 1, 4, PadMode::kReflect});
       }},
      {"unfold", [](const Tensor& x) { return unfold(x, 3); }},
      {"layer_norm", [](const Tensor& x) { return channel_layer_norm(x); }},
      {"fft_re", [](const Tensor& x) { return fft2(x).re; }},
      {"fft_im", [](const Tensor& x) { return fft2(x).im; }},
      {"fft_roundtrip", [&](const Tensor& x) {
         const ComplexTensor z = fft2(x);
         return ifft2({z.re * other, z.im});
       }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    CHECK(op_grad_error(op, s, 1234) < 1e-3);
  }
  // Strictly positive domain.
  CHECK(op_grad_error([](const Tensor& x) { return log(x); }, s, 50, 0.2, 2.0) < 1e-3);
  CHECK(op_grad_error([](const Tensor& x) { return sqrt(x); }, s, 51, 0.2, 2.0) < 1e-3);
  // Odd extents through the direct DFT path.
  CHECK(op_grad_error([](const Tensor& x) { return fft2(x).im; }, {1, 2, 5, 7}, 52) < 1e-3);
  CHECK(op_grad_error([](const Tensor& x) { return ifft2({x, square(x)}); }, {1, 2, 5, 7}, 53) < 1e-3);
  std::vector<int> gidx(2 * 3 * 16);
  for (std::size_t i = 0; i < gidx.size(); ++i) gidx[i] = static_cast<int>((i * 7) % 9);
  CHECK(op_grad_error([&](const Tensor& x) { return gather_axis2(unfold(x, 3), gidx, 3); },
                      {2, 2, 4, 4}, 54) < 1e-3);
}

TEST_CASE("ops are bit-deterministic") {
  auto run = [] {
    const Tensor x = random_tensor({2, 3, 8, 8}, 21);
    const Tensor w = random_tensor({4, 3, 3, 3}, 22);
    const Tensor y = softmax(conv2d(x, w, Tensor(), {1, 1, 1, 1, PadMode::kReflect}), 1);
    const ComplexTensor z = fft2(y);
    return ifft2({z.re, z.im});
  };
  const Tensor a = run();
  const Tensor b = run();
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST_CASE("production mode rounds to float32, shadow mode does not") {
  const double third = 1.0 / 3.0;
  CHECK(Tensor::scalar(third).item() == static_cast<double>(static_cast<float>(third)));
  ShadowPrecision shadow;
  CHECK(Tensor::scalar(third).item() == third);
}

TEST_CASE("non-finite results are reported with the op name") {
  const Tensor big = Tensor::full({1, 1, 1, 1}, 500.0);
  CHECK_THROWS_WITH_AS(exp(exp(big)), doctest::Contains("exp"), NonFiniteError);
}

TEST_CASE("frozen branches make kinked losses checkable") {
  ParameterSet ps;
  // 1e-5 from the relu kink: a 1e-3 probe crosses it.
  const Tensor p = ps.add("p", {1, 1, 1, 2}, {1e-5, -0.4});
  auto loss = [&] { return sum(relu(p) * 3.0 + clamp(p, -0.4, 1.0)); };

  const auto report = check_gradients(loss, ps, 1e-3);
  REQUIRE(report.size() == 1);
  CHECK(report[0].rel_error < 1e-9);
  const Gradients g = backward(loss(), ps);
  CHECK(g.at("p").values()[0] == doctest::Approx(4.0));
  CHECK(g.at("p").values()[1] == 0.0);

  // Without the freeze the same probe straddles the kink.
  const auto f = [&](const Tensor& t) {
    Tensor leaf = p;
    leaf.assign(t.values());
    return loss().item();
  };
  const Tensor fd = fd_gradient(f, p, 1e-3);
  CHECK(std::abs(fd.values()[0] - 4.0) > 0.5);

  BranchFreeze freeze;
  (void)relu(Tensor::from({1, 1, 1, 2}, {1.0, -1.0}));
  freeze.replay();
  const Tensor flipped = relu(Tensor::from({1, 1, 1, 2}, {-1.0, 1.0}));
  CHECK(flipped.values()[0] == -1.0);
  CHECK(flipped.values()[1] == 0.0);
  CHECK(freeze.unconsumed() == 0);
  freeze.rewind();
  CHECK_THROWS_AS((void)relu(Tensor::zeros({1, 1, 1, 3})), std::logic_error);
}
