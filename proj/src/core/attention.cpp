#include "vfa/attention.hpp"

#include <algorithm>
#include <cmath>

#include "vfa/error.hpp"

namespace vfa {

std::string to_string(Similarity s) {
  return s == Similarity::Cosine ? "cosine" : "inner_product";
}

Similarity parse_similarity(const std::string& name) {
  if (name == "inner_product" || name == "inner") return Similarity::InnerProduct;
  if (name == "cosine") return Similarity::Cosine;
  throw ParameterError("unknown similarity '" + name + "' (expected inner_product or cosine)");
}

double AttentionConfig::resolve_temperature(std::int64_t channels) const {
  if (temperature) return *temperature;
  return std::sqrt(static_cast<double>(channels));
}

void AttentionConfig::validate() const {
  if (window < 3 || window % 2 == 0) {
    throw ParameterError("attention window must be odd and >= 3, got " + std::to_string(window));
  }
  if (temperature && !(*temperature > 0)) {
    throw ParameterError("attention temperature must be positive, got " + std::to_string(*temperature));
  }
}

namespace {

template <typename T>
Var<T> offsets_matrix(int dims, int window, T sign) {
  if (dims < 1 || dims > 3) throw ParameterError("value matrix: dims must be 1..3");
  if (window < 1 || window % 2 == 0) throw ParameterError("value matrix: window must be odd");
  const int r = window / 2;
  std::int64_t K = 1;
  for (int a = 0; a < dims; ++a) K *= window;
  std::vector<T> v(static_cast<std::size_t>(K * dims));
  for (std::int64_t k = 0; k < K; ++k) {
    std::int64_t rem = k;
    for (int a = dims - 1; a >= 0; --a) {
      v[k * dims + a] = sign * static_cast<T>(rem % window - r);
      rem /= window;
    }
  }
  return Var<T>::from(Shape{K, dims}, std::move(v));
}

}  // namespace

template <typename T>
Var<T> value_matrix(int dims, int window) {
  return offsets_matrix<T>(dims, window, T(1));
}

template <typename T>
Var<T> raw_value_matrix(int dims, int window) {
  return offsets_matrix<T>(dims, window, T(-1));
}

template <typename T>
AttentionOutput<T> vfa_attention(const Var<T>& fixed_features, const Var<T>& moving_features,
                                 const AttentionConfig& cfg) {
  cfg.validate();
  if (fixed_features.shape() != moving_features.shape()) {
    throw DimensionError("vfa_attention: feature maps differ in shape, " + to_string(fixed_features.shape()) +
                         " vs " + to_string(moving_features.shape()));
  }
  const Extents3 e = spatial_extents(fixed_features.shape());
  const int d = e.dims;
  const std::int64_t C = fixed_features.dim(0);
  const std::int64_t N = e.count();
  const Shape spatial = spatial_shape(fixed_features.shape());

  Var<T> q = reshape(transpose_last2(reshape(fixed_features, Shape{C, N})), Shape{N, 1, C});
  Var<T> k = extract_windows(moving_features, cfg.window);
  if (cfg.similarity == Similarity::Cosine) {
    q = l2_normalize_last(q, T(1e-6));
    k = l2_normalize_last(k, T(1e-6));
  }
  const std::int64_t K = k.dim(1);
  Var<T> scores = matmul(q, transpose_last2(k));  // [N, 1, K]
  Var<T> weights = softmax(scores, -1, static_cast<T>(cfg.resolve_temperature(C)));
  Var<T> u = matmul(weights, value_matrix<T>(d, cfg.window));  // [N, 1, d]
  Shape out_shape{d};
  out_shape.insert(out_shape.end(), spatial.begin(), spatial.end());
  u = reshape(transpose_last2(reshape(u, Shape{N, d})), out_shape);
  return {u, reshape(weights, Shape{N, K})};
}

double sparsity_report(std::span<const double> weights, std::int64_t candidates) {
  if (candidates < 1 || weights.empty() || static_cast<std::int64_t>(weights.size()) % candidates != 0) {
    throw InputError("sparsity_report: weight count is not a multiple of the candidate count");
  }
  const std::int64_t rows = static_cast<std::int64_t>(weights.size()) / candidates;
  double acc = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0, mx = 0;
    for (std::int64_t k = 0; k < candidates; ++k) {
      const double w = weights[r * candidates + k];
      if (w < 0) throw InputError("sparsity_report: negative weight in row " + std::to_string(r));
      s += w;
      mx = std::max(mx, w);
    }
    if (std::abs(s - 1.0) > 1e-4) {
      throw InputError("sparsity_report: row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
    acc += mx;
  }
  return acc / static_cast<double>(rows);
}

template <typename T>
double sparsity_report(const Var<T>& weights) {
  if (weights.rank() != 2) throw DimensionError("sparsity_report: expected [N, K] weights");
  std::vector<double> w(weights.data().begin(), weights.data().end());
  return sparsity_report(w, weights.dim(1));
}

#define VFA_INSTANTIATE(T)                                                                        \
  template Var<T> value_matrix<T>(int, int);                                                      \
  template Var<T> raw_value_matrix<T>(int, int);                                                  \
  template AttentionOutput<T> vfa_attention(const Var<T>&, const Var<T>&, const AttentionConfig&); \
  template double sparsity_report(const Var<T>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
