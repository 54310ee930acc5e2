#pragma once

// Spatial transforms and the differentiable operations that consume them.
//
// A TransformGrid phi maps every voxel x of the fixed domain to an absolute
// sampling location phi(x) in the moving image: I_w(x) = I_m(phi(x)). It is
// stored as its displacement u = phi - id, so identity grids are exact and
// converting back and forth between phi and u never rounds. absolute()
// materialises phi when a sampler needs coordinates.
//
// Composition follows the warping semantics: compose(a, b)(x) = b(a(x)),
// hence warp(img, compose(a, b)) == warp(warp(img, b), a). It is evaluated as
// a.u(x) + b.u(a(x)), which extends b's displacement by its border value
// outside the domain.

#include <cstdint>
#include <vector>

#include "vfa/tensor.hpp"

namespace vfa {

// Positive voxel extents (2 or 3 axes) plus physical spacing in millimetres.
struct VolumeShape {
  std::vector<std::int64_t> extents;
  std::vector<double> spacing;

  int dims() const { return static_cast<int>(extents.size()); }
  std::int64_t voxels() const;
  static VolumeShape unit(std::vector<std::int64_t> extents);
  void validate() const;
};

template <typename T>
class TransformGrid {
 public:
  TransformGrid() = default;

  static TransformGrid identity(const std::vector<std::int64_t>& extents);
  // u: [d, s0, ..., s_{d-1}]
  static TransformGrid from_displacement(Var<T> u);
  // phi: absolute coordinates, same layout.
  static TransformGrid from_absolute(const Var<T>& phi);

  const Var<T>& displacement() const { return u_; }
  Var<T> absolute() const;
  int dims() const { return static_cast<int>(u_.dim(0)); }
  std::vector<std::int64_t> extents() const;

 private:
  explicit TransformGrid(Var<T> u) : u_(std::move(u)) {}
  Var<T> u_;
};

// Constant tensor [d, extents...] whose channel a holds the voxel index
// along axis a.
template <typename T>
Var<T> identity_coordinates(const std::vector<std::int64_t>& extents);

template <typename T>
TransformGrid<T> identity_grid(const std::vector<std::int64_t>& extents) {
  return TransformGrid<T>::identity(extents);
}

template <typename T>
TransformGrid<T> to_transform(const Var<T>& u) {
  return TransformGrid<T>::from_displacement(u);
}

template <typename T>
Var<T> to_displacement(const TransformGrid<T>& phi) {
  return phi.displacement();
}

// Linear resampling of img at phi(x), border-clamped.
template <typename T>
Var<T> warp(const Var<T>& img, const TransformGrid<T>& phi);

template <typename T>
TransformGrid<T> compose(const TransformGrid<T>& a, const TransformGrid<T>& b);

// Doubles the extents; the displacement is upsampled and scaled by 2.
template <typename T>
TransformGrid<T> upsample_transform(const TransformGrid<T>& phi);

// Halves the extents; the displacement is block-averaged and scaled by 1/2.
template <typename T>
TransformGrid<T> downsample_transform(const TransformGrid<T>& phi);

// Integrates a stationary velocity field v (voxel units) by scaling and
// squaring: phi = id + v / 2^steps, then phi = compose(phi, phi) `steps`
// times.
template <typename T>
TransformGrid<T> scaling_and_squaring(const Var<T>& v, int steps = 7);

// phi = beta * u + id, beta a single-element tensor.
template <typename T>
TransformGrid<T> apply_beta(const Var<T>& u, const Var<T>& beta);

}  // namespace vfa
