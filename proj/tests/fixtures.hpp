#pragma once

// Shared constructions for unit and acceptance tests.

#include <cstdint>
#include <random>
#include <vector>

#include "vfa/attention.hpp"
#include "vfa/tensor.hpp"

namespace fixture {

// One-hot feature pair on an n^d grid: every voxel of F carries a distinct
// code, and M(y) = F(y - s) wherever y - s is inside the domain (fresh codes
// elsewhere), so M(x + s) = F(x).
struct ShiftPair {
  vfa::Var<double> fixed, moving;
  std::int64_t n = 0;
  int d = 0;
};

inline ShiftPair one_hot_shift(int d, std::int64_t n, const std::vector<int>& s) {
  std::int64_t N = 1;
  for (int a = 0; a < d; ++a) N *= n;
  const std::int64_t C = 2 * N;
  std::vector<double> f(static_cast<std::size_t>(C * N), 0.0), m(f.size(), 0.0);
  std::vector<std::int64_t> idx(3, 0);
  for (std::int64_t p = 0; p < N; ++p) {
    std::int64_t rem = p;
    for (int a = d - 1; a >= 0; --a) {
      idx[a] = rem % n;
      rem /= n;
    }
    f[p * N + p] = 1.0;
    bool inside = true;
    std::int64_t src = 0;
    for (int a = 0; a < d; ++a) {
      const std::int64_t y = idx[a] - s[a];
      if (y < 0 || y >= n) inside = false;
      src = src * n + y;
    }
    const std::int64_t code = inside ? src : N + p;
    m[code * N + p] = 1.0;
  }
  vfa::Shape shape{C};
  for (int a = 0; a < d; ++a) shape.push_back(n);
  return {vfa::Var<double>::from(shape, f), vfa::Var<double>::from(shape, m), n, d};
}

// Offset of the best-scoring candidate in the window around voxel p, by
// explicit inner products; candidates outside the domain are clamped like
// the attention window.
inline std::vector<int> argmax_offset(const ShiftPair& pr, std::int64_t p, int window) {
  const int d = pr.d, r = window / 2;
  const std::int64_t n = pr.n;
  std::int64_t N = 1;
  for (int a = 0; a < d; ++a) N *= n;
  const std::int64_t C = pr.fixed.dim(0);
  std::vector<std::int64_t> x(3, 0);
  std::int64_t rem = p;
  for (int a = d - 1; a >= 0; --a) {
    x[a] = rem % n;
    rem /= n;
  }
  std::int64_t K = 1;
  for (int a = 0; a < d; ++a) K *= window;
  double best = -1e300;
  std::vector<int> arg(d, 0);
  for (std::int64_t k = 0; k < K; ++k) {
    std::vector<int> off(d);
    std::int64_t kk = k;
    for (int a = d - 1; a >= 0; --a) {
      off[a] = static_cast<int>(kk % window) - r;
      kk /= window;
    }
    std::int64_t q = 0;
    for (int a = 0; a < d; ++a) {
      std::int64_t y = x[a] + off[a];
      y = y < 0 ? 0 : (y >= n ? n - 1 : y);
      q = q * n + y;
    }
    double s = 0;
    for (std::int64_t c = 0; c < C; ++c) s += pr.fixed.at(c * N + p) * pr.moving.at(c * N + q);
    if (s > best) {
      best = s;
      arg = off;
    }
  }
  return arg;
}

inline bool interior(std::int64_t p, int d, std::int64_t n, int margin) {
  for (int a = d - 1; a >= 0; --a) {
    const std::int64_t c = p % n;
    p /= n;
    if (c < margin || c >= n - margin) return false;
  }
  return true;
}

}  // namespace fixture
