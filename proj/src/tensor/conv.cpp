// Convolution as im2col + GEMM. 2D inputs are handled as 3D with a unit
// trailing axis and a unit kernel extent along it.

#include "vfa/error.hpp"
#include "vfa/simd/kernels.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

namespace {

struct ConvGeom {
  std::int64_t cin = 0, cout = 0;
  Extents3 in, out;
  std::int64_t k[3] = {1, 1, 1};
  std::int64_t pad[3] = {0, 0, 0};
  std::int64_t stride[3] = {1, 1, 1};
  std::int64_t taps() const { return k[0] * k[1] * k[2]; }
  std::int64_t rows() const { return cin * taps(); }
};

template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::int64_t no = g.out.count();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.in.count();
    for (std::int64_t a = 0; a < g.k[0]; ++a)
      for (std::int64_t b = 0; b < g.k[1]; ++b)
        for (std::int64_t e = 0; e < g.k[2]; ++e, ++row) {
          T* dst = col + row * no;
          std::int64_t o = 0;
          for (std::int64_t i = 0; i < g.out.n[0]; ++i) {
            const std::int64_t si = i * g.stride[0] - g.pad[0] + a;
            const bool vi = si >= 0 && si < g.in.n[0];
            for (std::int64_t j = 0; j < g.out.n[1]; ++j) {
              const std::int64_t sj = j * g.stride[1] - g.pad[1] + b;
              const bool vj = vi && sj >= 0 && sj < g.in.n[1];
              for (std::int64_t l = 0; l < g.out.n[2]; ++l, ++o) {
                const std::int64_t sl = l * g.stride[2] - g.pad[2] + e;
                dst[o] = (vj && sl >= 0 && sl < g.in.n[2]) ? xc[(si * g.in.n[1] + sj) * g.in.n[2] + sl] : T(0);
              }
            }
          }
        }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const T* col, T* x) {
  const std::int64_t no = g.out.count();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    T* xc = x + c * g.in.count();
    for (std::int64_t a = 0; a < g.k[0]; ++a)
      for (std::int64_t b = 0; b < g.k[1]; ++b)
        for (std::int64_t e = 0; e < g.k[2]; ++e, ++row) {
          const T* src = col + row * no;
          std::int64_t o = 0;
          for (std::int64_t i = 0; i < g.out.n[0]; ++i) {
            const std::int64_t si = i * g.stride[0] - g.pad[0] + a;
            const bool vi = si >= 0 && si < g.in.n[0];
            for (std::int64_t j = 0; j < g.out.n[1]; ++j) {
              const std::int64_t sj = j * g.stride[1] - g.pad[1] + b;
              const bool vj = vi && sj >= 0 && sj < g.in.n[1];
              for (std::int64_t l = 0; l < g.out.n[2]; ++l, ++o) {
                const std::int64_t sl = l * g.stride[2] - g.pad[2] + e;
                if (vj && sl >= 0 && sl < g.in.n[2]) xc[(si * g.in.n[1] + sj) * g.in.n[2] + sl] += src[o];
              }
            }
          }
        }
  }
}

}  // namespace

template <typename T>
Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int padding) {
  if (stride < 1) throw ParameterError("conv: stride must be >= 1");
  if (padding < 0) throw ParameterError("conv: padding must be >= 0");
  ConvGeom g;
  g.in = spatial_extents(x.shape());
  const int d = g.in.dims;
  if (w.rank() != d + 2) {
    throw DimensionError("conv: weight " + to_string(w.shape()) + " does not match a " + std::to_string(d) +
                         "-D input " + to_string(x.shape()));
  }
  g.cin = x.dim(0);
  g.cout = w.dim(0);
  if (w.dim(1) != g.cin) {
    throw DimensionError("conv: input has " + std::to_string(g.cin) + " channels but weight " +
                         to_string(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv: bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }
  g.out.dims = d;
  Shape out_shape{g.cout};
  for (int a = 0; a < d; ++a) {
    g.k[a] = w.dim(2 + a);
    if (g.k[a] % 2 == 0) throw ParameterError("conv: kernel extents must be odd, got " + to_string(w.shape()));
    g.pad[a] = padding;
    g.stride[a] = stride;
    const std::int64_t o = (g.in.n[a] + 2 * padding - g.k[a]) / stride + 1;
    if (o < 1) throw DimensionError("conv: kernel larger than padded input " + to_string(x.shape()));
    g.out.n[a] = o;
    out_shape.push_back(o);
  }
  const std::int64_t no = g.out.count();
  const std::int64_t kr = g.rows();

  std::vector<T> col(static_cast<std::size_t>(kr * no));
  im2col(g, x.data().data(), col.data());
  std::vector<T> out(static_cast<std::size_t>(g.cout * no), T(0));
  if (bias.defined()) {
    for (std::int64_t c = 0; c < g.cout; ++c) std::fill_n(out.data() + c * no, no, bias.data()[c]);
  }
  simd::kernels<T>().gemm(g.cout, no, kr, w.data().data(), kr, col.data(), no, out.data(), no);

  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Var<T>::make("conv", out_shape, std::move(out), std::move(inputs), [g](typename Var<T>::Node& self) {
    const auto& kt = simd::kernels<T>();
    const std::int64_t no = g.out.count();
    const std::int64_t kr = g.rows();
    const T* W = self.inputs[1]->value.data();
    const T* gout = self.grad.data();
    T* gx = self.input_grad(0);
    T* gw = self.input_grad(1);
    T* gb = self.inputs.size() > 2 ? self.input_grad(2) : nullptr;
    if (gb) {
      for (std::int64_t c = 0; c < g.cout; ++c) {
        T s = 0;
        for (std::int64_t o = 0; o < no; ++o) s += gout[c * no + o];
        gb[c] += s;
      }
    }
    if (gw) {
      std::vector<T> col(static_cast<std::size_t>(kr * no));
      im2col(g, self.inputs[0]->value.data(), col.data());
      for (std::int64_t c = 0; c < g.cout; ++c)
        for (std::int64_t r = 0; r < kr; ++r) gw[c * kr + r] += kt.dot(gout + c * no, col.data() + r * no, no);
    }
    if (gx) {
      std::vector<T> gcol(static_cast<std::size_t>(kr * no), T(0));
      for (std::int64_t c = 0; c < g.cout; ++c)
        for (std::int64_t r = 0; r < kr; ++r) kt.axpy(W[c * kr + r], gout + c * no, gcol.data() + r * no, no);
      col2im(g, gcol.data(), gx);
    }
  });
}

template <typename T>
Var<T> conv_same(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (w.rank() < 3) throw DimensionError("conv: weight rank too small: " + to_string(w.shape()));
  return conv(x, w, bias, 1, static_cast<int>(w.dim(2) / 2));
}

template Var<float> conv(const Var<float>&, const Var<float>&, const Var<float>&, int, int);
template Var<double> conv(const Var<double>&, const Var<double>&, const Var<double>&, int, int);
template Var<float> conv_same(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> conv_same(const Var<double>&, const Var<double>&, const Var<double>&);

}  // namespace vfa
