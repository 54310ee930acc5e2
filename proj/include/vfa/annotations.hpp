#pragma once

#include <cstdint>
#include <vector>

namespace vfa {

// Integer class per voxel; 0 is background.
struct LabelMap {
  std::vector<std::int64_t> extents;
  std::vector<std::int32_t> labels;

  std::int64_t voxels() const;
  // Sorted distinct non-zero classes present.
  std::vector<std::int32_t> classes() const;
  std::int32_t max_label() const;
  void validate() const;
};

// Paired landmarks in voxel coordinates (row-major P x d) plus the physical
// spacing used to express distances in millimetres.
struct KeypointSet {
  int dims = 0;
  std::vector<double> fixed;
  std::vector<double> moving;
  std::vector<double> spacing;

  std::size_t size() const { return dims == 0 ? 0 : fixed.size() / static_cast<std::size_t>(dims); }
  bool empty() const { return size() == 0; }
  void validate() const;
};

}  // namespace vfa
