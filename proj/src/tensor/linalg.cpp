#include <algorithm>
#include <cmath>
#include <limits>

#include "vfa/error.hpp"
#include "vfa/simd/kernels.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

namespace {

struct BatchPlan {
  Shape batch;                         // broadcast batch shape
  std::vector<std::int64_t> a_offset;  // per batch element, in matrices
  std::vector<std::int64_t> b_offset;
};

BatchPlan plan_batches(const Shape& a, const Shape& b) {
  const Shape ab(a.begin(), a.end() - 2);
  const Shape bb(b.begin(), b.end() - 2);
  const std::size_t r = std::max(ab.size(), bb.size());
  BatchPlan plan;
  plan.batch.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i + ab.size() >= r ? ab[i + ab.size() - r] : 1;
    const std::int64_t eb = i + bb.size() >= r ? bb[i + bb.size() - r] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("matmul: batch dimensions of " + to_string(a) + " and " + to_string(b) +
                           " do not broadcast");
    }
    plan.batch[i] = std::max(ea, eb);
  }
  const std::int64_t total = numel(plan.batch);
  plan.a_offset.resize(total);
  plan.b_offset.resize(total);
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t t = 0; t < total; ++t) {
    std::int64_t ao = 0, bo = 0;
    for (std::size_t i = 0; i < r; ++i) {
      if (i + ab.size() >= r) {
        const std::int64_t e = ab[i + ab.size() - r];
        ao = ao * e + (e == 1 ? 0 : idx[i]);
      }
      if (i + bb.size() >= r) {
        const std::int64_t e = bb[i + bb.size() - r];
        bo = bo * e + (e == 1 ? 0 : idx[i]);
      }
    }
    plan.a_offset[t] = ao;
    plan.b_offset[t] = bo;
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++idx[i] < plan.batch[i]) break;
      idx[i] = 0;
    }
  }
  return plan;
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  auto plan = std::make_shared<BatchPlan>(plan_batches(a.shape(), b.shape()));
  Shape out_shape = plan->batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::int64_t batches = numel(plan->batch);
  std::vector<T> out(static_cast<std::size_t>(batches * m * n), T(0));
  const auto& kt = simd::kernels<T>();
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t t = 0; t < batches; ++t) {
    kt.gemm(m, n, k, ad + plan->a_offset[t] * m * k, k, bd + plan->b_offset[t] * k * n, n,
            out.data() + t * m * n, n);
  }
  return Var<T>::make("matmul", out_shape, std::move(out), {a, b},
                      [plan, m, n, k, batches](typename Var<T>::Node& self) {
                        const auto& kt = simd::kernels<T>();
                        const T* A = self.inputs[0]->value.data();
                        const T* B = self.inputs[1]->value.data();
                        T* gA = self.input_grad(0);
                        T* gB = self.input_grad(1);
                        for (std::int64_t t = 0; t < batches; ++t) {
                          const T* g = self.grad.data() + t * m * n;
                          const T* At = A + plan->a_offset[t] * m * k;
                          const T* Bt = B + plan->b_offset[t] * k * n;
                          if (gA) {
                            T* gAt = gA + plan->a_offset[t] * m * k;
                            for (std::int64_t i = 0; i < m; ++i)
                              for (std::int64_t p = 0; p < k; ++p)
                                gAt[i * k + p] += kt.dot(g + i * n, Bt + p * n, n);
                          }
                          if (gB) {
                            T* gBt = gB + plan->b_offset[t] * k * n;
                            for (std::int64_t i = 0; i < m; ++i)
                              for (std::int64_t p = 0; p < k; ++p)
                                kt.axpy(At[i * k + p], g + i * n, gBt + p * n, n);
                          }
                        }
                      });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank < 2 in " + to_string(a.shape()));
  const std::int64_t m = a.dim(-2), n = a.dim(-1);
  const std::int64_t batches = a.numel() / (m * n);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(a.data().size());
  auto x = a.data();
  for (std::int64_t t = 0; t < batches; ++t)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out[t * m * n + j * m + i] = x[t * m * n + i * n + j];
  return Var<T>::make("transpose", out_shape, std::move(out), {a},
                      [m, n, batches](typename Var<T>::Node& self) {
                        T* gx = self.input_grad(0);
                        for (std::int64_t t = 0; t < batches; ++t)
                          for (std::int64_t i = 0; i < m; ++i)
                            for (std::int64_t j = 0; j < n; ++j)
                              gx[t * m * n + i * n + j] += self.grad[t * m * n + j * m + i];
                      });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis, T temperature) {
  if (!(temperature > 0)) {
    throw ParameterError("softmax: temperature must be positive, got " + std::to_string(temperature));
  }
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range for " + to_string(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const std::int64_t n = x.shape()[axis];
  const T inv_t = T(1) / temperature;
  auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      T z = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const T e = std::exp((xv[base + k * inner] - mx) * inv_t);
        out[base + k * inner] = e;
        z += e;
      }
      const T iz = T(1) / z;
      for (std::int64_t k = 0; k < n; ++k) out[base + k * inner] *= iz;
    }
  }
  return Var<T>::make("softmax", x.shape(), std::move(out), {x},
                      [outer, inner, n, inv_t](typename Var<T>::Node& self) {
                        T* gx = self.input_grad(0);
                        const auto& y = self.value;
                        const auto& g = self.grad;
                        for (std::int64_t o = 0; o < outer; ++o) {
                          for (std::int64_t i = 0; i < inner; ++i) {
                            const std::int64_t base = o * n * inner + i;
                            T dotgy = 0;
                            for (std::int64_t k = 0; k < n; ++k) dotgy += g[base + k * inner] * y[base + k * inner];
                            for (std::int64_t k = 0; k < n; ++k) {
                              const std::int64_t idx = base + k * inner;
                              gx[idx] += y[idx] * (g[idx] - dotgy) * inv_t;
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> l2_normalize_last(const Var<T>& x, T eps) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  auto xv = x.data();
  std::vector<T> out(xv.size());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::int64_t j = 0; j < n; ++j) s += xv[r * n + j] * xv[r * n + j];
    const T nr = std::max(std::sqrt(s), eps);
    (*norms)[r] = std::sqrt(s);
    for (std::int64_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / nr;
  }
  return Var<T>::make("l2_normalize", x.shape(), std::move(out), {x},
                      [norms, rows, n, eps](typename Var<T>::Node& self) {
                        T* gx = self.input_grad(0);
                        const auto& y = self.value;
                        const auto& g = self.grad;
                        for (std::int64_t r = 0; r < rows; ++r) {
                          const T nr = (*norms)[r];
                          if (nr > eps) {
                            T yg = 0;
                            for (std::int64_t j = 0; j < n; ++j) yg += y[r * n + j] * g[r * n + j];
                            for (std::int64_t j = 0; j < n; ++j)
                              gx[r * n + j] += (g[r * n + j] - y[r * n + j] * yg) / nr;
                          } else {
                            for (std::int64_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] / eps;
                          }
                        }
                      });
}

template <typename T>
Var<T> norm_last(const Var<T>& x) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto xv = x.data();
  std::vector<T> out(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::int64_t j = 0; j < n; ++j) s += xv[r * n + j] * xv[r * n + j];
    out[r] = std::sqrt(s);
  }
  return Var<T>::make("norm", out_shape, std::move(out), {x}, [rows, n](typename Var<T>::Node& self) {
    T* gx = self.input_grad(0);
    const auto& xv = self.inputs[0]->value;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T nr = self.value[r];
      if (nr == T(0)) continue;
      const T s = self.grad[r] / nr;
      for (std::int64_t j = 0; j < n; ++j) gx[r * n + j] += s * xv[r * n + j];
    }
  });
}

#define VFA_INSTANTIATE(T)                                        \
  template Var<T> matmul(const Var<T>&, const Var<T>&);           \
  template Var<T> transpose_last2(const Var<T>&);                 \
  template Var<T> softmax(const Var<T>&, int, T);                 \
  template Var<T> l2_normalize_last(const Var<T>&, T);            \
  template Var<T> norm_last(const Var<T>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
