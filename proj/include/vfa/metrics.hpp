#pragma once

// Evaluation of transforms and label overlap. Nothing here is
// differentiable; everything runs in double precision on plain arrays.
//
// Pinned conventions:
//   * Jacobians use central differences and are defined on interior voxels
//     only (one-voxel border dropped). nd_voxels and sdlogj percentages are
//     relative to the interior voxel count.
//   * nd_volume splits every grid cell into d! simplices along the main
//     diagonal (Kuhn decomposition: 2 triangles in 2D, 6 tetrahedra in 3D),
//     maps the corners through phi and sums the magnitudes of negatively
//     oriented simplex volumes. The percentage is relative to the
//     undeformed volume of all cells, prod(n_a - 1).
//   * sdlogj is the population standard deviation of log(max(det J, 1e-6)).
//   * hd95 pools the boundary-to-boundary distances of both directions and
//     takes the nearest-rank 95th percentile (element ceil(0.95 n) of the
//     sorted list, 1-based). A boundary voxel is a foreground voxel with at
//     least one face neighbour that is background or outside the volume.
//   * Dice means skip background and classes absent from both maps.
//   * tre30 averages the ceil(0.3 n) smallest case means.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "vfa/annotations.hpp"
#include "vfa/geometry.hpp"

namespace vfa {

// Displacement field in double precision, layout [d, extents...].
struct DisplacementVolume {
  std::vector<std::int64_t> extents;
  std::vector<double> u;

  int dims() const { return static_cast<int>(extents.size()); }
  std::int64_t voxels() const;
  void validate() const;

  static DisplacementVolume identity(std::vector<std::int64_t> extents);
  template <typename T>
  static DisplacementVolume from(const TransformGrid<T>& phi);
  template <typename T>
  TransformGrid<T> to_transform() const;
};

inline constexpr double kLogJacobianFloor = 1e-6;

struct DiceResult {
  std::map<std::int32_t, double> per_class;
  double mean = 0.0;  // NaN when no foreground class is present in either map
};

DiceResult dice_score(const LabelMap& a, const LabelMap& b);

// Millimetres; nullopt when the class is missing from either map.
std::optional<double> hd95(const LabelMap& a, const LabelMap& b, std::int32_t label,
                           std::span<const double> spacing);
// Mean of hd95 over the classes present in both maps.
std::optional<double> mean_hd95(const LabelMap& a, const LabelMap& b, std::span<const double> spacing);

// Interior determinants, extents (n_a - 2), row-major.
std::vector<double> jacobian_determinant(const DisplacementVolume& phi);

struct FoldCount {
  std::int64_t count = 0;
  double percent = 0.0;
};
FoldCount nd_voxels(const DisplacementVolume& phi);

struct FoldVolume {
  double volume = 0.0;
  double percent = 0.0;
};
FoldVolume nd_volume(const DisplacementVolume& phi);

double sdlogj(const DisplacementVolume& phi);

// Per-keypoint distance in millimetres between phi(fixed_i) and moving_i.
std::vector<double> tre(const DisplacementVolume& phi, const KeypointSet& keypoints);
double mean_tre(const DisplacementVolume& phi, const KeypointSet& keypoints);
double tre30(std::span<const double> case_means);

// Nearest-neighbour resampling of a label map by phi (ties round half up,
// coordinates clamped to the domain).
LabelMap warp_labels_nearest(const LabelMap& moving, const DisplacementVolume& phi);

// Linear interpolation of the displacement at a continuous location
// (border-clamped), returned per axis.
std::vector<double> sample_displacement(const DisplacementVolume& phi, std::span<const double> point);

}  // namespace vfa
