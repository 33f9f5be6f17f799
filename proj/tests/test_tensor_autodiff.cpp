#include <catch2/catch_amalgamated.hpp>

#include "unvalley/autodiff.hpp"
#include "unvalley/ops.hpp"
#include "unvalley/rng.hpp"
#include "unvalley/tensor.hpp"

#include "testutil.hpp"

using namespace unvalley;
namespace o = unvalley::ops;
using testutil::check_gradients;

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE(t.shape() == Shape{2, 3});
  t.at2(1, 2) = 5.0;
  REQUIRE(t[5] == 5.0);
  REQUIRE_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  REQUIRE(t.reshaped({3, 2}).dim(0) == 3);

  Tensor a = Tensor::full({2, 2}, 2.0);
  Tensor b = Tensor::full({2, 2}, 3.0);
  a.add_(b, 0.5);
  REQUIRE(a[0] == Catch::Approx(3.5));
  REQUIRE(a.mean() == Catch::Approx(3.5));
}

TEST_CASE("rng determinism and gaussian moments") {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) REQUIRE(r1.next_u64() == r2.next_u64());

  Rng g(7);
  double sum = 0.0, sumsq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = g.gaussian();
    sum += v;
    sumsq += v * v;
  }
  REQUIRE(std::fabs(sum / n) < 0.01);
  REQUIRE(std::fabs(sumsq / n - 1.0) < 0.02);

  Rng base(3);
  Rng s1 = base.stream("a"), s2 = base.stream("b");
  REQUIRE(s1.next_u64() != s2.next_u64());
}

TEST_CASE("backward on a constant branch allocates no gradients") {
  Var frozen = Var::constant(Tensor::full({2, 2}, 1.0));
  Var live = Var::leaf(Tensor::full({2, 2}, 2.0));
  Var loss = o::mean_all(o::mul(o::add(frozen, live), live));
  ad::backward(loss);
  REQUIRE(live.has_grad());
  REQUIRE_FALSE(frozen.has_grad());

  // A graph with no differentiable inputs is constant end to end.
  Var pure = o::mean_all(o::square(frozen));
  REQUIRE_FALSE(pure.requires_grad());
}

TEST_CASE("gradient accumulates when a node is reused") {
  Var x = Var::leaf(Tensor::full({1}, 3.0));
  Var y = o::add(o::square(x), o::square(x));  // y = 2 x^2, dy/dx = 4x
  ad::backward(o::sum_all(y));
  REQUIRE(x.grad()[0] == Catch::Approx(12.0));
}

TEST_CASE("detach stops gradients") {
  Var x = Var::leaf(Tensor::full({1}, 2.0));
  Var d = ad::detach(o::square(x));
  REQUIRE_FALSE(d.requires_grad());
  Var loss = o::sum_all(o::mul(d, x));  // treated as const * x
  ad::backward(loss);
  REQUIRE(x.grad()[0] == Catch::Approx(4.0));
}

TEST_CASE("elementwise op gradients") {
  Rng rng(11);
  auto t = [&](Shape s) { return testutil::random_tensor(s, rng); };

  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::mul(v[0], v[1])); },
                  {t({3, 4}), t({3, 4})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::div(v[0], v[1])); },
                  {t({2, 3}), Tensor::full({2, 3}, 2.5)});
  check_gradients([](std::vector<Var>& v) { return o::sum_all(o::square(o::sub(v[0], v[1]))); },
                  {t({5}), t({5})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::tanh_op(o::mul_scalar(v[0], 0.7))); },
      {t({4, 2})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::softplus(v[0])); }, {t({6})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::leaky_relu(v[0], 0.2)); },
                  {t({9}) /* kinks unlikely at random draws */});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::sqrt_eps(o::square(v[0]), 1e-3)); },
                  {t({7})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::rsqrt_eps(o::square(v[0]), 1e-2)); },
      {t({5})});
  check_gradients([](std::vector<Var>& v) { return o::mean_abs_diff(v[0], v[1]); },
                  {t({4, 4}), t({4, 4})});
}

TEST_CASE("reduction and reshape gradients") {
  Rng rng(13);
  auto t = [&](Shape s) { return testutil::random_tensor(s, rng); };

  check_gradients(
      [](std::vector<Var>& v) { return o::sum_all(o::square(o::sum_tail(v[0], 2))); },
      {t({2, 3, 2, 2})});
  check_gradients([](std::vector<Var>& v) { return o::sum_all(o::square(o::mean_hw(v[0]))); },
                  {t({2, 3, 2, 2})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::reshape(v[0], {4, 2})));
      },
      {t({2, 4})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::select_row(v[0], 1))); },
      {t({3, 5})});
}

TEST_CASE("matmul and linear gradients") {
  Rng rng(17);
  auto t = [&](Shape s) { return testutil::random_tensor(s, rng); };

  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::matmul(v[0], v[1])); },
                  {t({3, 4}), t({4, 2})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::linear(v[0], v[1], v[2]))); },
      {t({2, 3}), t({4, 3}), t({4})});
}

TEST_CASE("broadcast op gradients") {
  Rng rng(19);
  auto t = [&](Shape s) { return testutil::random_tensor(s, rng); };

  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::scale_channels(v[0], v[1]))); },
      {t({2, 3, 2, 2}), t({2, 3})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::add_bias_channels(v[0], v[1])));
      },
      {t({2, 3, 2, 2}), t({3})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::mul_row_bcast(v[0], v[1]))); },
      {t({3, 4}), t({4})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::add_scaled_noise(v[0], v[1], v[2])));
      },
      {t({2, 3, 2, 2}), t({2, 1, 2, 2}), Tensor::full({1}, 0.8)});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::add_scaled_noise(v[0], v[1], v[2])));
      },
      {t({2, 3, 2, 2}), t({1, 1, 2, 2}), Tensor::full({1}, -0.4)});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::channel_weighted_sum(v[0], {0.3, 0.5, 0.2})));
      },
      {t({2, 3, 2, 2})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::channel_l2_normalize(v[0], 1e-6)));
      },
      {t({2, 3, 2, 2})}, 1e-5, 1e-5);
}

TEST_CASE("spatial op gradients") {
  Rng rng(23);
  auto t = [&](Shape s) { return testutil::random_tensor(s, rng); };

  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::conv2d(v[0], v[1]))); },
      {t({2, 2, 4, 4}), t({3, 2, 3, 3})}, 1e-5, 1e-5);
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::conv2d(v[0], v[1]))); },
      {t({1, 3, 3, 3}), t({2, 3, 1, 1})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::square(o::avg_pool2(v[0]))); },
                  {t({2, 2, 4, 4})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::square(o::upsample2(v[0]))); },
                  {t({1, 2, 3, 3})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::resample_area(v[0], 2, 2))); },
      {t({1, 2, 6, 6})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::gaussian_blur_op(v[0], kern::gaussian_taps(3, 1.0))));
      },
      {t({1, 2, 5, 5})});
  check_gradients([](std::vector<Var>& v) { return o::mean_all(o::square(o::flip_h(v[0]))); },
                  {t({1, 2, 3, 4})});
  check_gradients(
      [](std::vector<Var>& v) { return o::mean_all(o::square(o::roll2d(v[0], 1, 2))); },
      {t({1, 2, 3, 4})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::translate_per_sample(v[0], {{1, -1}, {0, 2}})));
      },
      {t({2, 2, 3, 4})});
  check_gradients(
      [](std::vector<Var>& v) {
        return o::mean_all(o::square(o::flip_h_per_sample(v[0], {1, 0})));
      },
      {t({2, 2, 3, 4})});
}

TEST_CASE("channel affine with constant coefficients") {
  Rng rng(29);
  Tensor scale = testutil::random_tensor({2, 3}, rng);
  Tensor shift = testutil::random_tensor({2, 3}, rng);
  check_gradients(
      [&](std::vector<Var>& v) {
        return o::mean_all(o::square(o::channel_affine_const(v[0], scale, shift)));
      },
      {testutil::random_tensor({2, 3, 2, 2}, rng)});
}

TEST_CASE("conv2d matches a direct correlation loop") {
  Rng rng(31);
  Tensor x = testutil::random_tensor({1, 2, 5, 5}, rng);
  Tensor w = testutil::random_tensor({3, 2, 3, 3}, rng);
  Var y = o::conv2d(Var::constant(x), Var::constant(w));

  for (std::int64_t oc = 0; oc < 3; ++oc)
    for (std::int64_t yy = 0; yy < 5; ++yy)
      for (std::int64_t xx = 0; xx < 5; ++xx) {
        double acc = 0.0;
        for (std::int64_t ic = 0; ic < 2; ++ic)
          for (std::int64_t ky = -1; ky <= 1; ++ky)
            for (std::int64_t kx = -1; kx <= 1; ++kx) {
              const std::int64_t sy = yy + ky, sx = xx + kx;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
              acc += x.at4(0, ic, sy, sx) * w.at4(oc, ic, ky + 1, kx + 1);
            }
        REQUIRE(y.value().at4(0, oc, yy, xx) == Catch::Approx(acc).margin(1e-12));
      }
}

TEST_CASE("roll2d wraps circularly") {
  Tensor x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Var y = o::roll2d(Var::constant(x), 0, 1);
  REQUIRE(y.value().at4(0, 0, 0, 0) == 3.0);
  REQUIRE(y.value().at4(0, 0, 0, 1) == 1.0);
  REQUIRE(y.value().at4(0, 0, 0, 2) == 2.0);
}
