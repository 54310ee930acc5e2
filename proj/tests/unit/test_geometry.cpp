#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "../oracles.hpp"
#include "doctest.h"
#include "vfa/error.hpp"
#include "vfa/geometry.hpp"

using namespace vfa;

namespace {

template <typename T>
Var<T> random_var(Shape shape, std::mt19937_64& rng, double lo = 0, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Var<T>::from(std::move(shape), std::move(v));
}

// Smooth 2-D field: a few low-frequency sinusoids per axis.
Var<double> smooth_field(std::int64_t n, double amp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ph(0, 6.28);
  std::vector<double> v(static_cast<std::size_t>(2 * n * n));
  for (int a = 0; a < 2; ++a) {
    const double p0 = ph(rng), p1 = ph(rng);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        v[(a * n + i) * n + j] = amp * std::sin(6.28 * i / n + p0) * std::cos(6.28 * j / n + p1);
  }
  return Var<double>::from(Shape{2, n, n}, v);
}

template <typename T>
bool bitwise_equal(const Var<T>& a, const Var<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), sizeof(T) * a.numel()) == 0;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE_TEMPLATE("identity transform warps bitwise", T, float, double) {
    std::mt19937_64 rng(1);
    for (const std::vector<std::int64_t>& ext : {std::vector<std::int64_t>{9, 7}, std::vector<std::int64_t>{4, 5, 6}}) {
      Shape s{2};
      s.insert(s.end(), ext.begin(), ext.end());
      const auto img = random_var<T>(s, rng);
      const auto id = TransformGrid<T>::identity(ext);
      for (std::int64_t i = 0; i < id.displacement().numel(); ++i) CHECK(id.displacement().at(i) == T(0));
      CHECK(bitwise_equal(warp(img, id), img));
      CHECK(bitwise_equal(id.absolute(), identity_coordinates<T>(ext)));
    }
  }

  TEST_CASE("absolute and displacement views round trip exactly") {
    std::mt19937_64 rng(2);
    const auto u = random_var<double>({2, 5, 6}, rng, -3, 3);
    const auto phi = TransformGrid<double>::from_displacement(u);
    const auto back = TransformGrid<double>::from_absolute(phi.absolute());
    for (std::int64_t i = 0; i < u.numel(); ++i) CHECK(back.displacement().at(i) == doctest::Approx(u.at(i)).epsilon(1e-15));
    CHECK_THROWS_AS(TransformGrid<double>::from_displacement(random_var<double>({3, 5, 6}, rng)), DimensionError);
  }

  TEST_CASE("constant shift warps by exact resampling") {
    std::mt19937_64 rng(3);
    const auto img = random_var<double>({1, 8, 8}, rng);
    std::vector<double> u(2 * 64);
    for (int p = 0; p < 64; ++p) {
      u[p] = 1;
      u[64 + p] = -2;
    }
    const auto w = warp(img, to_transform(Var<double>::from(Shape{2, 8, 8}, u)));
    for (int i = 0; i < 7; ++i)
      for (int j = 2; j < 8; ++j) CHECK(w.at(i * 8 + j) == img.at((i + 1) * 8 + j - 2));
  }

  TEST_CASE("compose follows warping order") {
    // a: integer shift, so warp(warp(img, b), a) samples b's warp at grid
    // points and the two sides agree up to rounding on the interior.
    std::mt19937_64 rng(4);
    const std::int64_t n = 16;
    const auto img = random_var<double>({1, n, n}, rng);
    std::vector<double> ua(2 * n * n);
    for (std::int64_t p = 0; p < n * n; ++p) {
      ua[p] = 2;
      ua[n * n + p] = -1;
    }
    const auto a = to_transform(Var<double>::from(Shape{2, n, n}, ua));
    const auto b = to_transform(smooth_field(n, 1.5, 7));
    const auto lhs = warp(img, compose(a, b));
    const auto rhs = warp(warp(img, b), a);
    for (std::int64_t i = 0; i < n - 2; ++i)
      for (std::int64_t j = 1; j < n; ++j) CHECK(lhs.at(i * n + j) == doctest::Approx(rhs.at(i * n + j)).epsilon(1e-12));
    // Identity is neutral on both sides.
    const auto id = TransformGrid<double>::identity({n, n});
    const auto l = compose(id, b), r = compose(b, id);
    for (std::int64_t i = 0; i < 2 * n * n; ++i) {
      CHECK(l.displacement().at(i) == doctest::Approx(b.displacement().at(i)));
      CHECK(r.displacement().at(i) == doctest::Approx(b.displacement().at(i)));
    }
    CHECK_THROWS_AS(compose(a, TransformGrid<double>::identity({n, n + 2})), DimensionError);
  }

  TEST_CASE("compose evaluates a.u + b.u(a(x)) pointwise") {
    const std::int64_t n = 10;
    const auto ua = smooth_field(n, 2.0, 1), ub = smooth_field(n, 2.0, 2);
    const auto c = compose(to_transform(ua), to_transform(ub));
    const oracle::Dims g = oracle::dims_of({n, n});
    const std::vector<double> vb(ub.data().begin(), ub.data().end());
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        const std::int64_t p = i * n + j;
        const double x[2] = {i + ua.at(p), j + ua.at(n * n + p)};
        for (int ax = 0; ax < 2; ++ax)
          CHECK(c.displacement().at(ax * n * n + p) ==
                doctest::Approx(ua.at(ax * n * n + p) + oracle::sample(vb, g, ax, x)).epsilon(1e-12));
      }
  }

  TEST_CASE("transform resampling scales displacements") {
    std::vector<double> u(2 * 16, 0.0);
    for (int p = 0; p < 16; ++p) {
      u[p] = 1.5;
      u[16 + p] = -0.5;
    }
    const auto phi = to_transform(Var<double>::from(Shape{2, 4, 4}, u));
    const auto up = upsample_transform(phi);
    REQUIRE(up.extents() == std::vector<std::int64_t>{8, 8});
    for (int p = 0; p < 64; ++p) {
      CHECK(up.displacement().at(p) == doctest::Approx(3.0));
      CHECK(up.displacement().at(64 + p) == doctest::Approx(-1.0));
    }
    const auto down = downsample_transform(phi);
    REQUIRE(down.extents() == std::vector<std::int64_t>{2, 2});
    for (int p = 0; p < 4; ++p) CHECK(down.displacement().at(p) == doctest::Approx(0.75));
  }

  TEST_CASE("scaling and squaring matches Euler integration of the flow") {
    const std::int64_t n = 24;
    const auto v = smooth_field(n, 1.2, 5);
    const auto phi = scaling_and_squaring(v, 7);
    const oracle::Dims g = oracle::dims_of({n, n});
    const std::vector<double> vv(v.data().begin(), v.data().end());
    double worst = 0;
    for (std::int64_t i = 4; i < n - 4; ++i)
      for (std::int64_t j = 4; j < n - 4; ++j) {
        double x[2] = {static_cast<double>(i), static_cast<double>(j)};
        const int steps = 2000;
        for (int s = 0; s < steps; ++s) {
          const double dx = oracle::sample(vv, g, 0, x), dy = oracle::sample(vv, g, 1, x);
          x[0] += dx / steps;
          x[1] += dy / steps;
        }
        const std::int64_t p = i * n + j;
        worst = std::max(worst, std::abs(i + phi.displacement().at(p) - x[0]));
        worst = std::max(worst, std::abs(j + phi.displacement().at(n * n + p) - x[1]));
      }
    INFO("max deviation " << worst);
    CHECK(worst < 0.05);
  }

  TEST_CASE("scaling and squaring of a constant velocity is a pure shift") {
    std::vector<double> v(2 * 64);
    for (int p = 0; p < 64; ++p) {
      v[p] = 0.75;
      v[64 + p] = -0.25;
    }
    const auto phi = scaling_and_squaring(Var<double>::from(Shape{2, 8, 8}, v), 7);
    for (int p = 0; p < 64; ++p) {
      CHECK(phi.displacement().at(p) == doctest::Approx(0.75).epsilon(1e-12));
      CHECK(phi.displacement().at(64 + p) == doctest::Approx(-0.25).epsilon(1e-12));
    }
    CHECK_THROWS_AS(scaling_and_squaring(Var<double>::from(Shape{2, 8, 8}, v), 0), ParameterError);
  }

  TEST_CASE("apply_beta scales the displacement") {
    std::mt19937_64 rng(6);
    const auto u = random_var<double>({2, 5, 5}, rng, -2, 2);
    const auto zero = apply_beta(u, Var<double>::scalar(0.0));
    for (std::int64_t i = 0; i < u.numel(); ++i) CHECK(zero.displacement().at(i) == 0.0);
    const auto half = apply_beta(u, Var<double>::scalar(0.5));
    for (std::int64_t i = 0; i < u.numel(); ++i) CHECK(half.displacement().at(i) == 0.5 * u.at(i));
    CHECK_THROWS_AS(apply_beta(u, Var<double>::zeros(Shape{2})), DimensionError);
  }

  TEST_CASE("volume shape validation") {
    CHECK_NOTHROW(VolumeShape::unit({4, 5}).validate());
    CHECK_THROWS_AS((VolumeShape{{4, 0}, {1, 1}}).validate(), DimensionError);
    CHECK_THROWS_AS((VolumeShape{{4, 4}, {1, 0}}).validate(), InputError);
    CHECK_THROWS_AS((VolumeShape{{4, 4}, {1}}).validate(), DimensionError);
  }
}
