#include "vfa/geometry.hpp"

#include <cmath>

#include "vfa/error.hpp"

namespace vfa {

std::int64_t VolumeShape::voxels() const {
  std::int64_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

VolumeShape VolumeShape::unit(std::vector<std::int64_t> extents) {
  VolumeShape s;
  s.spacing.assign(extents.size(), 1.0);
  s.extents = std::move(extents);
  return s;
}

void VolumeShape::validate() const {
  if (extents.empty() || extents.size() > 3) {
    throw DimensionError("volume must have 1 to 3 axes, got " + std::to_string(extents.size()));
  }
  for (auto e : extents) {
    if (e <= 0) throw DimensionError("volume extents must be positive, got " + to_string(extents));
  }
  if (spacing.size() != extents.size()) {
    throw DimensionError("spacing has " + std::to_string(spacing.size()) + " entries for " +
                         std::to_string(extents.size()) + " axes");
  }
  for (double s : spacing) {
    if (!(s > 0) || !std::isfinite(s)) throw InputError("spacing must be strictly positive and finite");
  }
}

template <typename T>
Var<T> identity_coordinates(const std::vector<std::int64_t>& extents) {
  Shape shape{static_cast<std::int64_t>(extents.size())};
  shape.insert(shape.end(), extents.begin(), extents.end());
  const Extents3 e = spatial_extents(shape);
  const std::int64_t N = e.count();
  std::vector<T> v(static_cast<std::size_t>(e.dims * N));
  for (std::int64_t i = 0; i < e.n[0]; ++i)
    for (std::int64_t j = 0; j < e.n[1]; ++j)
      for (std::int64_t l = 0; l < e.n[2]; ++l) {
        const std::int64_t p = (i * e.n[1] + j) * e.n[2] + l;
        const std::int64_t idx[3] = {i, j, l};
        for (int a = 0; a < e.dims; ++a) v[a * N + p] = static_cast<T>(idx[a]);
      }
  return Var<T>::from(std::move(shape), std::move(v));
}

template <typename T>
TransformGrid<T> TransformGrid<T>::identity(const std::vector<std::int64_t>& extents) {
  Shape shape{static_cast<std::int64_t>(extents.size())};
  shape.insert(shape.end(), extents.begin(), extents.end());
  return TransformGrid(Var<T>::zeros(shape));
}

template <typename T>
TransformGrid<T> TransformGrid<T>::from_displacement(Var<T> u) {
  if (!u.defined() || u.rank() < 2 || u.dim(0) != u.rank() - 1) {
    throw DimensionError("displacement field needs one channel per spatial axis, got " +
                         (u.defined() ? to_string(u.shape()) : std::string("<undefined>")));
  }
  return TransformGrid(std::move(u));
}

template <typename T>
TransformGrid<T> TransformGrid<T>::from_absolute(const Var<T>& phi) {
  if (!phi.defined() || phi.rank() < 2 || phi.dim(0) != phi.rank() - 1) {
    throw DimensionError("transform grid needs one channel per spatial axis");
  }
  auto ext = spatial_shape(phi.shape());
  return TransformGrid(sub(phi, identity_coordinates<T>(ext)));
}

template <typename T>
Var<T> TransformGrid<T>::absolute() const {
  return add(u_, identity_coordinates<T>(extents()));
}

template <typename T>
std::vector<std::int64_t> TransformGrid<T>::extents() const {
  return spatial_shape(u_.shape());
}

template <typename T>
Var<T> warp(const Var<T>& img, const TransformGrid<T>& phi) {
  if (spatial_shape(img.shape()).size() != static_cast<std::size_t>(phi.dims())) {
    throw DimensionError("warp: image " + to_string(img.shape()) + " and a " + std::to_string(phi.dims()) +
                         "-D transform");
  }
  return grid_sample(img, phi.absolute());
}

template <typename T>
TransformGrid<T> compose(const TransformGrid<T>& a, const TransformGrid<T>& b) {
  if (a.displacement().shape() != b.displacement().shape()) {
    throw DimensionError("compose: transforms of shape " + to_string(a.displacement().shape()) + " and " +
                         to_string(b.displacement().shape()));
  }
  return TransformGrid<T>::from_displacement(add(a.displacement(), grid_sample(b.displacement(), a.absolute())));
}

template <typename T>
TransformGrid<T> upsample_transform(const TransformGrid<T>& phi) {
  return TransformGrid<T>::from_displacement(mul_scalar(upsample2(phi.displacement()), T(2)));
}

template <typename T>
TransformGrid<T> downsample_transform(const TransformGrid<T>& phi) {
  return TransformGrid<T>::from_displacement(mul_scalar(downsample2(phi.displacement()), T(0.5)));
}

template <typename T>
TransformGrid<T> scaling_and_squaring(const Var<T>& v, int steps) {
  if (steps < 1) throw ParameterError("scaling_and_squaring: steps must be >= 1, got " + std::to_string(steps));
  auto phi = TransformGrid<T>::from_displacement(mul_scalar(v, static_cast<T>(std::ldexp(1.0, -steps))));
  for (int s = 0; s < steps; ++s) phi = compose(phi, phi);
  return phi;
}

template <typename T>
TransformGrid<T> apply_beta(const Var<T>& u, const Var<T>& beta) {
  if (beta.numel() != 1) throw DimensionError("apply_beta: beta must be a single value");
  return TransformGrid<T>::from_displacement(mul(u, beta));
}

#define VFA_INSTANTIATE(T)                                                                    \
  template class TransformGrid<T>;                                                            \
  template Var<T> identity_coordinates<T>(const std::vector<std::int64_t>&);                  \
  template Var<T> warp(const Var<T>&, const TransformGrid<T>&);                               \
  template TransformGrid<T> compose(const TransformGrid<T>&, const TransformGrid<T>&);        \
  template TransformGrid<T> upsample_transform(const TransformGrid<T>&);                      \
  template TransformGrid<T> downsample_transform(const TransformGrid<T>&);                    \
  template TransformGrid<T> scaling_and_squaring(const Var<T>&, int);                         \
  template TransformGrid<T> apply_beta(const Var<T>&, const Var<T>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
