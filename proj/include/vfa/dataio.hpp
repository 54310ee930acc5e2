#pragma once

// File formats.
//
// Volume file: an ASCII header followed immediately by the raw payload.
//
//   VFAVOL 1
//   dims <n0> <n1> [<n2>]
//   spacing <s0> <s1> [<s2>]
//   channels <C>
//   dtype f32|f64|i32
//   byteorder little
//   end
//
// Each header line ends with '\n'. The payload holds C * prod(n) values,
// little-endian, channel-major then row-major ([C, n0, n1, n2], last axis
// fastest). Images are 1-channel volumes, transforms are d-channel
// displacement volumes in voxel units, label maps are 1-channel i32.
//
// Keypoint CSV: optional header row starting with "fx"; then one row per
// pair "fx,fy[,fz],mx,my[,mz]" in voxel coordinates. Blank lines and lines
// starting with '#' are skipped.
//
// Run config: "key = value" lines; '#' starts a comment; keys are the long
// CLI flag names without dashes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vfa/annotations.hpp"
#include "vfa/geometry.hpp"
#include "vfa/metrics.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

enum class Dtype { F32, F64, I32 };

std::string to_string(Dtype d);
std::size_t dtype_size(Dtype d);

struct Volume {
  VolumeShape shape;
  std::int64_t channels = 1;
  Dtype dtype = Dtype::F32;
  std::vector<double> values;  // exact for every supported dtype

  std::int64_t numel() const { return channels * shape.voxels(); }
  void validate() const;

  template <typename T>
  Var<T> to_var() const;
  template <typename T>
  static Volume from_var(const Var<T>& v, std::vector<double> spacing, Dtype dtype);

  LabelMap to_labels() const;
  static Volume from_labels(const LabelMap& labels, std::vector<double> spacing);
  DisplacementVolume to_displacement() const;
  static Volume from_displacement(const DisplacementVolume& phi, std::vector<double> spacing, Dtype dtype);
};

Volume read_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Volume& volume);

struct KeypointReadResult {
  KeypointSet keypoints;
  std::vector<std::string> warnings;
};

// dims: 2 or 3; 0 infers it from the column count (4 or 6).
KeypointReadResult read_keypoints(const std::filesystem::path& path, int dims = 0);
void write_keypoints(const std::filesystem::path& path, const KeypointSet& keypoints);

// 8-bit binary PGM of a rows x cols map, linearly scaled so the largest
// value is white (all-zero maps stay black).
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::int64_t rows,
               std::int64_t cols);

// A repeated key keeps its last value.
using ConfigMap = std::map<std::string, std::string>;
ConfigMap read_run_config(const std::filesystem::path& path);
ConfigMap parse_run_config(const std::string& text, const std::string& origin = "<config>");

}  // namespace vfa
