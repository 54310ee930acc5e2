#include <cmath>
#include <random>
#include <vector>

#include "../oracles.hpp"
#include "doctest.h"
#include "vfa/error.hpp"
#include "vfa/losses.hpp"

using namespace vfa;

namespace {

Var<double> random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0, 1);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = d(rng);
  return Var<double>::from(std::move(shape), std::move(v));
}

std::vector<double> vec(const Var<double>& v) { return {v.data().begin(), v.data().end()}; }

LabelMap labels(std::vector<std::int64_t> ext, std::vector<std::int32_t> v) { return {std::move(ext), std::move(v)}; }

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("windowed NCC matches explicit window statistics") {
    for (int win : {3, 5, 9}) {
      const auto f = random_image({1, 9, 11}, 1), w = random_image({1, 9, 11}, 2);
      const double ref = oracle::ncc_loss(vec(f), vec(w), oracle::dims_of({9, 11}), win, kNccEpsilon);
      CHECK(ncc_loss(f, w, win).item() == doctest::Approx(ref).epsilon(1e-10));
    }
    const auto f3 = random_image({1, 5, 6, 7}, 3), w3 = random_image({1, 5, 6, 7}, 4);
    CHECK(ncc_loss(f3, w3, 3).item() ==
          doctest::Approx(oracle::ncc_loss(vec(f3), vec(w3), oracle::dims_of({5, 6, 7}), 3, kNccEpsilon)).epsilon(1e-10));
  }

  TEST_CASE("NCC of an image with itself or an affine copy is -1") {
    const auto f = random_image({1, 12, 12}, 5);
    CHECK(ncc_loss(f, f).item() == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(ncc_loss(f, add_scalar(mul_scalar(f, 2.5), 0.3)).item() == doctest::Approx(-1.0).epsilon(1e-4));
  }

  TEST_CASE("NCC stays finite on flat images in single precision") {
    const auto f = Var<float>::full(Shape{1, 12, 12}, 0.3f);
    const auto w = Var<float>::full(Shape{1, 12, 12}, 0.7f);
    const float v = ncc_loss(f, w).item();
    CHECK(std::isfinite(v));
    CHECK(v <= -0.99f);
  }

  TEST_CASE("NCC argument validation") {
    const auto f = random_image({1, 6, 6}, 1);
    CHECK_THROWS_AS(ncc_loss(f, f, 4), ParameterError);
    CHECK_THROWS_AS(ncc_loss(f, f, 7), ParameterError);
    CHECK_THROWS_AS(ncc_loss(f, random_image({1, 6, 5}, 2)), DimensionError);
  }

  TEST_CASE("MI matches an explicitly accumulated histogram") {
    for (int bins : {4, 16, 32}) {
      const auto a = random_image({1, 10, 10}, 6), b = random_image({1, 10, 10}, 7);
      CHECK(mi_loss(a, b, bins).item() == doctest::Approx(-oracle::mi(vec(a), vec(b), bins, kMiEpsilon)).epsilon(1e-10));
    }
  }

  TEST_CASE("MI prefers dependent intensities, including inverted contrast") {
    const auto a = random_image({1, 16, 16}, 8);
    const auto noise = random_image({1, 16, 16}, 9);
    const auto inverted = add_scalar(neg(a), 1.0);
    const double self = mi_loss(a, a, 16).item();
    const double inv = mi_loss(a, inverted, 16).item();
    const double indep = mi_loss(a, noise, 16).item();
    CHECK(self < indep);
    CHECK(inv < indep);
    CHECK(inv == doctest::Approx(self).epsilon(1e-9));
    CHECK_THROWS_AS(mi_loss(a, a, 1), ParameterError);
  }

  TEST_CASE("diffusion regulariser is the mean squared forward difference") {
    std::mt19937_64 rng(10);
    const auto u = random_image({2, 5, 7}, 11);
    double ref = 0;
    for (int ax = 0; ax < 2; ++ax) {
      double s = 0, n = 0;
      for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 5; ++i)
          for (int j = 0; j < 7; ++j) {
            const int i2 = i + (ax == 0), j2 = j + (ax == 1);
            if (i2 >= 5 || j2 >= 7) continue;
            const double d = u.at((c * 5 + i2) * 7 + j2) - u.at((c * 5 + i) * 7 + j);
            s += d * d;
            n += 1;
          }
      ref += s / n;
    }
    CHECK(diffusion_reg(u).item() == doctest::Approx(ref / 2).epsilon(1e-12));
    CHECK(diffusion_reg(Var<double>::full(Shape{2, 4, 4}, 3.0)).item() == 0.0);
  }

  TEST_CASE("MSE") {
    const auto a = Var<double>::from(Shape{1, 2, 2}, {0, 1, 2, 3});
    const auto b = Var<double>::from(Shape{1, 2, 2}, {1, 1, 2, 1});
    CHECK(mse_loss(a, b).item() == doctest::Approx(1.25));
  }

  TEST_CASE("Dice loss bounds") {
    const LabelMap a = labels({2, 3}, {1, 1, 0, 2, 2, 0});
    const LabelMap b = labels({2, 3}, {0, 0, 1, 0, 0, 2});
    const auto oa = one_hot<double>(a, {1, 2}), ob = one_hot<double>(b, {1, 2});
    REQUIRE(oa.shape() == Shape{2, 2, 3});
    CHECK(dice_loss(oa, oa).item() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(dice_loss(oa, ob).item() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK_THROWS_AS(dice_loss(oa, one_hot<double>(b, {1})), DimensionError);
  }

  TEST_CASE("TRE loss measures millimetre distances after mapping") {
    KeypointSet kp;
    kp.dims = 2;
    kp.fixed = {1, 1, 2, 3};
    kp.moving = {2, 1, 2, 5};
    kp.spacing = {2.0, 0.5};
    const auto id = TransformGrid<double>::identity({6, 6});
    CHECK(tre_loss(id, kp).item() == doctest::Approx(1.5));
    std::vector<double> u(72, 0.0);
    for (int p = 0; p < 36; ++p) u[p] = 1.0;
    CHECK(tre_loss(to_transform(Var<double>::from(Shape{2, 6, 6}, u)), kp).item() == doctest::Approx((0.0 + std::sqrt(4.0 + 1.0)) / 2));
    KeypointSet outside = kp;
    outside.fixed[0] = 9;
    CHECK_THROWS_AS(tre_loss(id, outside), InputError);
    KeypointSet wrong = kp;
    wrong.dims = 3;
    wrong.fixed = {1, 1, 1};
    wrong.moving = {1, 1, 1};
    wrong.spacing = {1, 1, 1};
    CHECK_THROWS_AS(tre_loss(id, wrong), DimensionError);
  }
}
