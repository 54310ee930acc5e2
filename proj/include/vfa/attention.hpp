#pragma once

// Parameter-free matching and retrieval: for every fixed-image feature the
// w^d candidates in a window around the same location of the moving feature
// map are scored, softmax-normalised, and the weights average a fixed
// matrix of offset vectors. The result is a displacement per voxel.
//
// Offset pairing: candidate k (lexicographic over {-r..r}^d, first axis
// slowest) reads M(x + k) and is paired with the row +k of the value
// matrix. With this pairing, if M is F shifted so that M(x + s) = F(x), the
// retrieved field is u = s and warp(M, id + u) reproduces F. The literal
// origin-pointing matrix (rows -k) is available from raw_value_matrix for
// inspection; it describes the same geometry seen from the candidate side.

#include <optional>
#include <span>
#include <string>

#include "vfa/tensor.hpp"

namespace vfa {

enum class Similarity { InnerProduct, Cosine };

std::string to_string(Similarity s);
Similarity parse_similarity(const std::string& name);

struct AttentionConfig {
  std::optional<double> temperature;  // empty: sqrt of the feature channel count
  Similarity similarity = Similarity::InnerProduct;
  int window = 3;

  double resolve_temperature(std::int64_t channels) const;
  void validate() const;
  bool beyond_evaluated_window() const { return window > 3; }
};

// Rows are the offsets +k in candidate order; shape [w^d, d].
template <typename T>
Var<T> value_matrix(int dims, int window = 3);

// Rows are -k, the origin-pointing vectors.
template <typename T>
Var<T> raw_value_matrix(int dims, int window = 3);

template <typename T>
struct AttentionOutput {
  Var<T> displacement;  // [d, spatial...]
  Var<T> weights;       // [N, w^d], rows sum to 1
};

template <typename T>
AttentionOutput<T> vfa_attention(const Var<T>& fixed_features, const Var<T>& moving_features,
                                 const AttentionConfig& cfg);

// Mean over voxels of the largest attention weight. Rows must be valid
// softmax outputs (sum to 1 within 1e-4).
double sparsity_report(std::span<const double> weights, std::int64_t candidates);

template <typename T>
double sparsity_report(const Var<T>& weights);

}  // namespace vfa
