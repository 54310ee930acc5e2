#include <algorithm>
#include <cmath>

#include "vfa/error.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

namespace {

// Strided view of one spatial axis: index = (pre * len + i) * post + q.
struct AxisView {
  std::int64_t pre, len, post;
};

AxisView axis_view(std::int64_t channels, const Extents3& e, int axis) {
  AxisView v{channels, e.n[axis], 1};
  for (int b = 0; b < axis; ++b) v.pre *= e.n[b];
  for (int b = axis + 1; b < 3; ++b) v.post *= e.n[b];
  return v;
}

template <typename T>
std::vector<T> upsample_axis(const std::vector<T>& in, const AxisView& v) {
  const std::int64_t n = v.len;
  std::vector<T> out(static_cast<std::size_t>(v.pre * 2 * n * v.post));
  for (std::int64_t p = 0; p < v.pre; ++p)
    for (std::int64_t j = 0; j < n; ++j) {
      const std::int64_t jl = std::max<std::int64_t>(j - 1, 0);
      const std::int64_t jr = std::min<std::int64_t>(j + 1, n - 1);
      const T* c = in.data() + (p * n + j) * v.post;
      const T* l = in.data() + (p * n + jl) * v.post;
      const T* r = in.data() + (p * n + jr) * v.post;
      T* e = out.data() + (p * 2 * n + 2 * j) * v.post;
      T* o = out.data() + (p * 2 * n + 2 * j + 1) * v.post;
      for (std::int64_t q = 0; q < v.post; ++q) {
        e[q] = T(0.75) * c[q] + T(0.25) * l[q];
        o[q] = T(0.75) * c[q] + T(0.25) * r[q];
      }
    }
  return out;
}

// Adjoint of upsample_axis; v describes the coarse (input) side.
template <typename T>
std::vector<T> upsample_axis_adjoint(const std::vector<T>& gout, const AxisView& v) {
  const std::int64_t n = v.len;
  std::vector<T> gin(static_cast<std::size_t>(v.pre * n * v.post), T(0));
  for (std::int64_t p = 0; p < v.pre; ++p)
    for (std::int64_t j = 0; j < n; ++j) {
      const std::int64_t jl = std::max<std::int64_t>(j - 1, 0);
      const std::int64_t jr = std::min<std::int64_t>(j + 1, n - 1);
      T* c = gin.data() + (p * n + j) * v.post;
      T* l = gin.data() + (p * n + jl) * v.post;
      T* r = gin.data() + (p * n + jr) * v.post;
      const T* e = gout.data() + (p * 2 * n + 2 * j) * v.post;
      const T* o = gout.data() + (p * 2 * n + 2 * j + 1) * v.post;
      for (std::int64_t q = 0; q < v.post; ++q) {
        c[q] += T(0.75) * (e[q] + o[q]);
        l[q] += T(0.25) * e[q];
        r[q] += T(0.25) * o[q];
      }
    }
  return gin;
}

// Clipped running-window sum along one axis.
template <typename T>
void box_axis(std::vector<T>& data, const AxisView& v, std::int64_t radius) {
  std::vector<T> prefix(static_cast<std::size_t>(v.len + 1));
  for (std::int64_t p = 0; p < v.pre; ++p)
    for (std::int64_t q = 0; q < v.post; ++q) {
      prefix[0] = 0;
      for (std::int64_t i = 0; i < v.len; ++i) prefix[i + 1] = prefix[i] + data[(p * v.len + i) * v.post + q];
      for (std::int64_t i = 0; i < v.len; ++i) {
        const std::int64_t lo = std::max<std::int64_t>(i - radius, 0);
        const std::int64_t hi = std::min<std::int64_t>(i + radius, v.len - 1);
        data[(p * v.len + i) * v.post + q] = prefix[hi + 1] - prefix[lo];
      }
    }
}

template <typename T>
std::vector<T> box_sum_raw(std::span<const T> x, std::int64_t channels, const Extents3& e, std::int64_t radius) {
  std::vector<T> out(x.begin(), x.end());
  for (int a = 0; a < e.dims; ++a) box_axis(out, axis_view(channels, e, a), radius);
  return out;
}

// Interpolation stencil for one sample point.
struct Stencil {
  std::int64_t lo[3] = {0, 0, 0};
  std::int64_t hi[3] = {0, 0, 0};
  double frac[3] = {0, 0, 0};
  bool inside[3] = {true, true, true};  // false when the coordinate was clamped
};

template <typename T>
Stencil make_stencil(const T* coords, std::int64_t stride, std::int64_t p, const Extents3& in) {
  Stencil s;
  for (int a = 0; a < in.dims; ++a) {
    const double c = static_cast<double>(coords[a * stride + p]);
    const std::int64_t n = in.n[a];
    if (std::isnan(c)) throw InputError("grid_sample: NaN coordinate at sample " + std::to_string(p));
    double cc = c;
    if (cc < 0) {
      cc = 0;
      s.inside[a] = false;
    } else if (cc > static_cast<double>(n - 1)) {
      cc = static_cast<double>(n - 1);
      s.inside[a] = false;
    }
    if (n == 1) {
      s.lo[a] = s.hi[a] = 0;
      s.frac[a] = 0;
      s.inside[a] = false;
      continue;
    }
    std::int64_t i0 = static_cast<std::int64_t>(std::floor(cc));
    if (i0 > n - 2) i0 = n - 2;
    s.lo[a] = i0;
    s.hi[a] = i0 + 1;
    s.frac[a] = cc - static_cast<double>(i0);
  }
  return s;
}

}  // namespace

template <typename T>
Var<T> downsample2(const Var<T>& x) {
  const Extents3 in = spatial_extents(x.shape());
  const std::int64_t C = x.dim(0);
  Extents3 out = in;
  Shape out_shape{C};
  std::int64_t f[3] = {1, 1, 1};
  for (int a = 0; a < in.dims; ++a) {
    if (in.n[a] < 2 || in.n[a] % 2 != 0) {
      throw DimensionError("downsample2: spatial extents must be even and >= 2, got " + to_string(x.shape()));
    }
    f[a] = 2;
    out.n[a] = in.n[a] / 2;
    out_shape.push_back(out.n[a]);
  }
  const T scale = T(1) / static_cast<T>(f[0] * f[1] * f[2]);
  auto xv = x.data();
  std::vector<T> res(static_cast<std::size_t>(C * out.count()), T(0));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < in.n[0]; ++i)
      for (std::int64_t j = 0; j < in.n[1]; ++j)
        for (std::int64_t l = 0; l < in.n[2]; ++l) {
          const std::int64_t o = ((c * out.n[0] + i / f[0]) * out.n[1] + j / f[1]) * out.n[2] + l / f[2];
          res[o] += xv[((c * in.n[0] + i) * in.n[1] + j) * in.n[2] + l];
        }
  for (auto& v : res) v *= scale;
  const std::int64_t f0 = f[0], f1 = f[1], f2 = f[2];
  return Var<T>::make("downsample2", out_shape, std::move(res), {x},
                      [C, in, out, f0, f1, f2, scale](typename Var<T>::Node& self) {
                        T* gx = self.input_grad(0);
                        for (std::int64_t c = 0; c < C; ++c)
                          for (std::int64_t i = 0; i < in.n[0]; ++i)
                            for (std::int64_t j = 0; j < in.n[1]; ++j)
                              for (std::int64_t l = 0; l < in.n[2]; ++l) {
                                const std::int64_t o =
                                    ((c * out.n[0] + i / f0) * out.n[1] + j / f1) * out.n[2] + l / f2;
                                gx[((c * in.n[0] + i) * in.n[1] + j) * in.n[2] + l] += scale * self.grad[o];
                              }
                      });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
  const Extents3 in = spatial_extents(x.shape());
  const std::int64_t C = x.dim(0);
  std::vector<T> cur(x.data().begin(), x.data().end());
  Extents3 e = in;
  for (int a = 0; a < in.dims; ++a) {
    cur = upsample_axis(cur, axis_view(C, e, a));
    e.n[a] *= 2;
  }
  Shape out_shape{C};
  for (int a = 0; a < in.dims; ++a) out_shape.push_back(e.n[a]);
  return Var<T>::make("upsample2", out_shape, std::move(cur), {x}, [C, in](typename Var<T>::Node& self) {
    // Undo the axis passes in reverse order.
    Extents3 e = in;
    for (int a = 0; a < in.dims; ++a) e.n[a] *= 2;
    std::vector<T> g = self.grad;
    for (int a = in.dims - 1; a >= 0; --a) {
      e.n[a] /= 2;
      g = upsample_axis_adjoint(g, axis_view(C, e, a));
    }
    T* gx = self.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  if (spatial_shape(a.shape()) != spatial_shape(b.shape())) {
    throw DimensionError("concat_channels: spatial shapes differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::int64_t na = a.numel();
  return Var<T>::make("concat", out_shape, std::move(out), {a, b}, [na](typename Var<T>::Node& self) {
    if (T* ga = self.input_grad(0))
      for (std::int64_t i = 0; i < na; ++i) ga[i] += self.grad[i];
    if (T* gb = self.input_grad(1)) {
      const std::int64_t nb = static_cast<std::int64_t>(self.grad.size()) - na;
      for (std::int64_t i = 0; i < nb; ++i) gb[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Var<T> grid_sample(const Var<T>& img, const Var<T>& coords) {
  const Extents3 in = spatial_extents(img.shape());
  const int d = in.dims;
  if (coords.rank() < 2 || coords.dim(0) != d) {
    throw DimensionError("grid_sample: coordinates " + to_string(coords.shape()) + " need " + std::to_string(d) +
                         " channels for image " + to_string(img.shape()));
  }
  const std::int64_t C = img.dim(0);
  const std::int64_t P = coords.numel() / d;
  const std::int64_t in_count = in.count();
  Shape out_shape{C};
  for (std::size_t i = 1; i < coords.shape().size(); ++i) out_shape.push_back(coords.shape()[i]);
  const T* iv = img.data().data();
  const T* cv = coords.data().data();
  const int corners = 1 << d;
  std::vector<T> out(static_cast<std::size_t>(C * P));
  for (std::int64_t p = 0; p < P; ++p) {
    const Stencil s = make_stencil(cv, P, p, in);
    for (int k = 0; k < corners; ++k) {
      std::int64_t idx[3] = {0, 0, 0};
      T w = 1;
      for (int a = 0; a < d; ++a) {
        const bool up = (k >> (d - 1 - a)) & 1;
        idx[a] = up ? s.hi[a] : s.lo[a];
        w *= static_cast<T>(up ? s.frac[a] : 1.0 - s.frac[a]);
      }
      const std::int64_t off = (idx[0] * in.n[1] + idx[1]) * in.n[2] + idx[2];
      for (std::int64_t c = 0; c < C; ++c) {
        if (k == 0) out[c * P + p] = 0;
        out[c * P + p] += w * iv[c * in_count + off];
      }
    }
  }
  return Var<T>::make("grid_sample", out_shape, std::move(out), {img, coords},
                      [in, d, C, P, corners](typename Var<T>::Node& self) {
                        const T* iv = self.inputs[0]->value.data();
                        const T* cv = self.inputs[1]->value.data();
                        T* gi = self.input_grad(0);
                        T* gc = self.input_grad(1);
                        const std::int64_t in_count = in.count();
                        const auto& g = self.grad;
                        for (std::int64_t p = 0; p < P; ++p) {
                          const Stencil s = make_stencil(cv, P, p, in);
                          for (int k = 0; k < corners; ++k) {
                            std::int64_t idx[3] = {0, 0, 0};
                            T wa[3] = {1, 1, 1};
                            T sign[3] = {0, 0, 0};
                            T w = 1;
                            for (int a = 0; a < d; ++a) {
                              const bool up = (k >> (d - 1 - a)) & 1;
                              idx[a] = up ? s.hi[a] : s.lo[a];
                              wa[a] = static_cast<T>(up ? s.frac[a] : 1.0 - s.frac[a]);
                              sign[a] = up ? T(1) : T(-1);
                              w *= wa[a];
                            }
                            const std::int64_t off = (idx[0] * in.n[1] + idx[1]) * in.n[2] + idx[2];
                            if (gi) {
                              for (std::int64_t c = 0; c < C; ++c) gi[c * in_count + off] += w * g[c * P + p];
                            }
                            if (gc) {
                              T acc = 0;
                              for (std::int64_t c = 0; c < C; ++c) acc += g[c * P + p] * iv[c * in_count + off];
                              for (int a = 0; a < d; ++a) {
                                if (!s.inside[a]) continue;
                                T dw = sign[a];
                                for (int b = 0; b < d; ++b)
                                  if (b != a) dw *= wa[b];
                                gc[a * P + p] += dw * acc;
                              }
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> extract_windows(const Var<T>& m, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ParameterError("extract_windows: window must be odd and positive, got " + std::to_string(window));
  }
  const Extents3 e = spatial_extents(m.shape());
  const int d = e.dims;
  const std::int64_t C = m.dim(0);
  const std::int64_t N = e.count();
  const std::int64_t r = window / 2;
  std::int64_t K = 1;
  for (int a = 0; a < d; ++a) K *= window;
  // Source flat index for each (voxel, candidate).
  auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(N * K));
  std::int64_t off[3] = {0, 0, 0};
  for (std::int64_t k = 0; k < K; ++k) {
    std::int64_t rem = k;
    for (int a = d - 1; a >= 0; --a) {
      off[a] = rem % window - r;
      rem /= window;
    }
    for (std::int64_t i = 0; i < e.n[0]; ++i)
      for (std::int64_t j = 0; j < e.n[1]; ++j)
        for (std::int64_t l = 0; l < e.n[2]; ++l) {
          const std::int64_t si = std::clamp<std::int64_t>(i + off[0], 0, e.n[0] - 1);
          const std::int64_t sj = std::clamp<std::int64_t>(j + off[1], 0, e.n[1] - 1);
          const std::int64_t sl = std::clamp<std::int64_t>(l + off[2], 0, e.n[2] - 1);
          const std::int64_t p = (i * e.n[1] + j) * e.n[2] + l;
          (*src)[p * K + k] = (si * e.n[1] + sj) * e.n[2] + sl;
        }
  }
  auto mv = m.data();
  std::vector<T> out(static_cast<std::size_t>(N * K * C));
  for (std::int64_t pk = 0; pk < N * K; ++pk) {
    const std::int64_t s = (*src)[pk];
    for (std::int64_t c = 0; c < C; ++c) out[pk * C + c] = mv[c * N + s];
  }
  return Var<T>::make("extract_windows", Shape{N, K, C}, std::move(out), {m},
                      [src, N, K, C](typename Var<T>::Node& self) {
                        T* gm = self.input_grad(0);
                        for (std::int64_t pk = 0; pk < N * K; ++pk) {
                          const std::int64_t s = (*src)[pk];
                          for (std::int64_t c = 0; c < C; ++c) gm[c * N + s] += self.grad[pk * C + c];
                        }
                      });
}

template <typename T>
Var<T> box_sum(const Var<T>& x, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ParameterError("box_sum: window must be odd and positive, got " + std::to_string(window));
  }
  const Extents3 e = spatial_extents(x.shape());
  const std::int64_t C = x.dim(0);
  const std::int64_t r = window / 2;
  auto out = box_sum_raw<T>(x.data(), C, e, r);
  return Var<T>::make("box_sum", x.shape(), std::move(out), {x}, [C, e, r](typename Var<T>::Node& self) {
    auto g = box_sum_raw<T>(std::span<const T>(self.grad), C, e, r);
    T* gx = self.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> diff_forward(const Var<T>& x, int axis) {
  const Extents3 e = spatial_extents(x.shape());
  if (axis < 0 || axis >= e.dims) {
    throw DimensionError("diff_forward: spatial axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
  }
  if (e.n[axis] < 2) throw DimensionError("diff_forward: axis needs >= 2 samples in " + to_string(x.shape()));
  const std::int64_t C = x.dim(0);
  const AxisView v = axis_view(C, e, axis);
  Shape out_shape = x.shape();
  out_shape[1 + axis] -= 1;
  auto xv = x.data();
  const std::int64_t m = v.len - 1;
  std::vector<T> out(static_cast<std::size_t>(v.pre * m * v.post));
  for (std::int64_t p = 0; p < v.pre; ++p)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t q = 0; q < v.post; ++q)
        out[(p * m + i) * v.post + q] = xv[(p * v.len + i + 1) * v.post + q] - xv[(p * v.len + i) * v.post + q];
  return Var<T>::make("diff_forward", out_shape, std::move(out), {x}, [v, m](typename Var<T>::Node& self) {
    T* gx = self.input_grad(0);
    for (std::int64_t p = 0; p < v.pre; ++p)
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t q = 0; q < v.post; ++q) {
          const T g = self.grad[(p * m + i) * v.post + q];
          gx[(p * v.len + i + 1) * v.post + q] += g;
          gx[(p * v.len + i) * v.post + q] -= g;
        }
  });
}

#define VFA_INSTANTIATE(T)                                              \
  template Var<T> downsample2(const Var<T>&);                           \
  template Var<T> upsample2(const Var<T>&);                             \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);        \
  template Var<T> grid_sample(const Var<T>&, const Var<T>&);            \
  template Var<T> extract_windows(const Var<T>&, int);                  \
  template Var<T> box_sum(const Var<T>&, int);                          \
  template Var<T> diff_forward(const Var<T>&, int);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
