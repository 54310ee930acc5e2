#pragma once

// Synthetic registration pairs with known ground truth.
//
// The moving image is drawn first. A displacement is sampled as white
// noise per axis, Gaussian-smoothed with standard deviation `smoothness`
// voxels and rescaled so that the largest per-voxel Euclidean norm equals
// `max_displacement`. The fixed image is the moving image warped by it,
// I_f(x) = I_m(x + u(x)). Fields with any non-positive interior Jacobian
// determinant are redrawn.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vfa/annotations.hpp"
#include "vfa/metrics.hpp"
#include "vfa/tensor.hpp"
#include "vfa/train.hpp"

namespace vfa {

enum class SynthKind { Blobs, CheckerOrgans, Texture };

std::string to_string(SynthKind k);
SynthKind parse_synth_kind(const std::string& name);

struct SynthSpec {
  SynthKind kind = SynthKind::Blobs;
  std::vector<std::int64_t> extents{64, 64};
  double smoothness = 6.0;        // voxels
  double max_displacement = 4.0;  // voxels
  int keypoints = 0;
  int max_attempts = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthPair {
  Var<double> fixed;   // [1, extents...], values in [0, 1]
  Var<double> moving;
  DisplacementVolume phi_gt;
  std::optional<LabelMap> fixed_labels;
  std::optional<LabelMap> moving_labels;
  std::optional<KeypointSet> keypoints;  // moving = fixed + u_gt(fixed)
  int attempts = 1;
};

SynthPair gen_synthetic_pair(const SynthSpec& spec);

template <typename T>
Sample<T> to_sample(const SynthPair& pair, const std::string& name = "synthetic");

}  // namespace vfa
