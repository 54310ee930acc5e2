#include <cmath>

#include "vfa/error.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

namespace {

enum class Bcast { None, Left, Right };  // which operand is the broadcast scalar

template <typename T>
Bcast check_binary(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::None;
  if (b.numel() == 1) return Bcast::Right;
  if (a.numel() == 1) return Bcast::Left;
  throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()) + " are not compatible");
}

// Generic binary op with value fn f(x, y) and partials dfx(x, y, out), dfy(x, y, out).
template <typename T, typename F, typename Dx, typename Dy>
Var<T> binary(const char* name, const Var<T>& a, const Var<T>& b, F f, Dx dfx, Dy dfy) {
  const Bcast bc = check_binary(a, b, name);
  const Shape shape = bc == Bcast::Left ? b.shape() : a.shape();
  const auto n = static_cast<std::size_t>(numel(shape));
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = bc == Bcast::Left ? av[0] : av[i];
    const T y = bc == Bcast::Right ? bv[0] : bv[i];
    out[i] = f(x, y);
  }
  return Var<T>::make(name, shape, std::move(out), {a, b}, [bc, n, dfx, dfy](typename Var<T>::Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const auto& g = self.grad;
    T* gx = self.input_grad(0);
    T* gy = self.input_grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T xv = bc == Bcast::Left ? x[0] : x[i];
      const T yv = bc == Bcast::Right ? y[0] : y[i];
      const T o = self.value[i];
      if (gx) gx[bc == Bcast::Left ? 0 : i] += g[i] * dfx(xv, yv, o);
      if (gy) gy[bc == Bcast::Right ? 0 : i] += g[i] * dfy(xv, yv, o);
    }
  });
}

template <typename T, typename F, typename D>
Var<T> unary(const char* name, const Var<T>& a, F f, D df) {
  auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return Var<T>::make(name, a.shape(), std::move(out), {a}, [df](typename Var<T>::Node& self) {
    const auto& x = self.inputs[0]->value;
    T* gx = self.input_grad(0);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return unary<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T c) {
  return unary<T>(
      "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return unary<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T o) { return T(0.5) / o; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T o) { return o; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary<T>(
      "leaky_relu", a, [slope](T x) { return x > 0 ? x : slope * x; },
      [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, T lo) {
  return unary<T>(
      "clamp_min", a, [lo](T x) { return x > lo ? x : lo; }, [lo](T x, T) { return x > lo ? T(1) : T(0); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return Var<T>::make("sum", Shape{}, {s}, {a}, [](typename Var<T>::Node& self) {
    T* gx = self.input_grad(0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T s = 0;
  for (T v : a.data()) s += v;
  return Var<T>::make("mean", Shape{}, {s * inv}, {a}, [inv](typename Var<T>::Node& self) {
    T* gx = self.input_grad(0);
    const T g = self.grad[0] * inv;
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> sum_axis(const Var<T>& a, int axis) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("sum_axis: axis out of range for shape " + to_string(a.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
  const std::int64_t n = a.shape()[axis];
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  auto x = a.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  return Var<T>::make("sum_axis", out_shape, std::move(out), {a},
                      [outer, inner, n](typename Var<T>::Node& self) {
                        T* gx = self.input_grad(0);
                        for (std::int64_t o = 0; o < outer; ++o)
                          for (std::int64_t k = 0; k < n; ++k)
                            for (std::int64_t i = 0; i < inner; ++i)
                              gx[(o * n + k) * inner + i] += self.grad[o * inner + i];
                      });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return Var<T>::make("reshape", std::move(shape), std::move(out), {a}, [](typename Var<T>::Node& self) {
    T* gx = self.input_grad(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

#define VFA_INSTANTIATE(T)                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);         \
  template Var<T> sub(const Var<T>&, const Var<T>&);         \
  template Var<T> mul(const Var<T>&, const Var<T>&);         \
  template Var<T> div(const Var<T>&, const Var<T>&);         \
  template Var<T> add_scalar(const Var<T>&, T);              \
  template Var<T> mul_scalar(const Var<T>&, T);              \
  template Var<T> neg(const Var<T>&);                        \
  template Var<T> square(const Var<T>&);                     \
  template Var<T> sqrt(const Var<T>&);                       \
  template Var<T> exp(const Var<T>&);                        \
  template Var<T> log(const Var<T>&);                        \
  template Var<T> leaky_relu(const Var<T>&, T);              \
  template Var<T> clamp_min(const Var<T>&, T);               \
  template Var<T> sum(const Var<T>&);                        \
  template Var<T> mean(const Var<T>&);                       \
  template Var<T> sum_axis(const Var<T>&, int);              \
  template Var<T> reshape(const Var<T>&, Shape);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
