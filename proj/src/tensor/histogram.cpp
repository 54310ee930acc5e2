#include <algorithm>
#include <cmath>

#include "vfa/error.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

namespace {

struct BinWeight {
  std::int64_t lo;
  double frac;  // weight of bin lo+1; bin lo gets 1 - frac
  bool inside;  // value within [0, 1]; outside values are clamped and carry no gradient
};

BinWeight bin_of(double v, int bins) {
  BinWeight w{0, 0.0, true};
  if (v < 0) {
    v = 0;
    w.inside = false;
  } else if (v > 1) {
    v = 1;
    w.inside = false;
  }
  const double pos = v * (bins - 1);
  std::int64_t lo = static_cast<std::int64_t>(std::floor(pos));
  if (lo > bins - 2) lo = bins - 2;
  w.lo = lo;
  w.frac = pos - static_cast<double>(lo);
  return w;
}

}  // namespace

template <typename T>
Var<T> soft_joint_histogram(const Var<T>& a, const Var<T>& b, int bins) {
  if (bins < 2) throw ParameterError("soft_joint_histogram: bins must be >= 2, got " + std::to_string(bins));
  if (a.numel() != b.numel()) {
    throw DimensionError("soft_joint_histogram: sample counts differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  const std::int64_t n = a.numel();
  const T inv_n = T(1) / static_cast<T>(n);
  std::vector<T> h(static_cast<std::size_t>(bins * bins), T(0));
  auto av = a.data();
  auto bv = b.data();
  for (std::int64_t s = 0; s < n; ++s) {
    const BinWeight wa = bin_of(static_cast<double>(av[s]), bins);
    const BinWeight wb = bin_of(static_cast<double>(bv[s]), bins);
    const T a0 = static_cast<T>(1.0 - wa.frac), a1 = static_cast<T>(wa.frac);
    const T b0 = static_cast<T>(1.0 - wb.frac), b1 = static_cast<T>(wb.frac);
    h[wa.lo * bins + wb.lo] += a0 * b0 * inv_n;
    h[wa.lo * bins + wb.lo + 1] += a0 * b1 * inv_n;
    h[(wa.lo + 1) * bins + wb.lo] += a1 * b0 * inv_n;
    h[(wa.lo + 1) * bins + wb.lo + 1] += a1 * b1 * inv_n;
  }
  return Var<T>::make("soft_joint_histogram", Shape{bins, bins}, std::move(h), {a, b},
                      [n, bins, inv_n](typename Var<T>::Node& self) {
                        const auto& av = self.inputs[0]->value;
                        const auto& bv = self.inputs[1]->value;
                        T* ga = self.input_grad(0);
                        T* gb = self.input_grad(1);
                        const auto& G = self.grad;
                        const T scale = static_cast<T>(bins - 1) * inv_n;
                        for (std::int64_t s = 0; s < n; ++s) {
                          const BinWeight wa = bin_of(static_cast<double>(av[s]), bins);
                          const BinWeight wb = bin_of(static_cast<double>(bv[s]), bins);
                          const T a0 = static_cast<T>(1.0 - wa.frac), a1 = static_cast<T>(wa.frac);
                          const T b0 = static_cast<T>(1.0 - wb.frac), b1 = static_cast<T>(wb.frac);
                          const std::int64_t i = wa.lo, j = wb.lo;
                          const T g00 = G[i * bins + j], g01 = G[i * bins + j + 1];
                          const T g10 = G[(i + 1) * bins + j], g11 = G[(i + 1) * bins + j + 1];
                          if (ga && wa.inside) ga[s] += scale * (b0 * (g10 - g00) + b1 * (g11 - g01));
                          if (gb && wb.inside) gb[s] += scale * (a0 * (g01 - g00) + a1 * (g11 - g10));
                        }
                      });
}

template Var<float> soft_joint_histogram(const Var<float>&, const Var<float>&, int);
template Var<double> soft_joint_histogram(const Var<double>&, const Var<double>&, int);

}  // namespace vfa
