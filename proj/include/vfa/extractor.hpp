#pragma once

// U-shaped convolutional feature extractor.
//
// With L = channels.size() levels, level i (0 = finest) has extents
// input / 2^i and channels[i] feature channels. Encoder level i is one
// 3^d conv + leaky ReLU, fed by the 2x block average of level i-1. The
// decoder runs from the coarsest level up: the coarser decoder output is
// linearly upsampled, convolved to channels[i], concatenated after the
// encoder features of level i and mixed by one more conv. The pyramid holds
// the decoder outputs ordered fine to coarse; the coarsest entry is the
// bottom encoder output.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vfa/tensor.hpp"

namespace vfa {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

struct ExtractorConfig {
  std::vector<std::int64_t> channels{8, 16, 32, 64, 128};
  std::int64_t match_channels = 16;
  bool shared_weights = true;
  double leaky_slope = 0.2;
  int kernel = 3;

  int levels() const { return static_cast<int>(channels.size()); }
  // Every spatial extent must be divisible by this.
  std::int64_t divisor() const { return std::int64_t{1} << (levels() - 1); }
  ExtractorConfig halved() const;
  void validate() const;
};

template <typename T>
using FeaturePyramid = std::vector<Var<T>>;

template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ExtractorConfig& cfg, int dims, std::mt19937_64& rng);

  // img: [1, spatial...]
  FeaturePyramid<T> extract(const Var<T>& img) const;

  NamedParams<T> parameters(const std::string& prefix) const;
  std::int64_t parameter_count() const;
  int dims() const { return dims_; }

 private:
  struct Conv {
    Var<T> w, b;
  };
  ExtractorConfig cfg_;
  int dims_ = 0;
  std::vector<Conv> enc_;  // one per level
  std::vector<Conv> up_;   // levels 0..L-2
  std::vector<Conv> dec_;  // levels 0..L-2
};

// Kaiming-uniform weights for the leaky rectifier, fan-in uniform bias.
template <typename T>
void init_conv(Var<T>& w, Var<T>& b, std::int64_t c_out, std::int64_t c_in, int kernel, int dims, double slope,
               std::mt19937_64& rng);

void check_divisible(const std::vector<std::int64_t>& extents, std::int64_t divisor);

template <typename T>
std::pair<FeaturePyramid<T>, FeaturePyramid<T>> extract_pair(const FeatureExtractor<T>& fixed_net,
                                                             const FeatureExtractor<T>& moving_net,
                                                             const Var<T>& fixed, const Var<T>& moving);

// Parameter count of an extractor with this config, without building it.
std::int64_t extractor_parameter_count(const ExtractorConfig& cfg, int dims);

}  // namespace vfa
