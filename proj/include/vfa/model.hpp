#pragma once

// Multi-resolution registration model.
//
// Levels are indexed 0 (finest, input resolution) to L-1 (coarsest).
// Registration runs coarse to fine. At level i the moving features are
// warped by the upsampled transform of level i+1 (identity at the coarsest
// level), both feature maps pass through their own pre-matching conv, and
// the attention displacement u_i is turned into a local transform
// id + beta * u_i (or its scaling-and-squaring integral in diffeomorphic
// mode). The level transform is phi_i = compose(local_i, up(phi_{i+1})),
// i.e. phi_i(x) = up(phi_{i+1})(local_i(x)). beta is one scalar shared by
// all levels.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vfa/attention.hpp"
#include "vfa/extractor.hpp"
#include "vfa/geometry.hpp"

namespace vfa {

inline constexpr double kDefaultBeta = 0.1;

struct ModelConfig {
  ExtractorConfig extractor;
  AttentionConfig attention;
  double beta0 = kDefaultBeta;
  bool diffeomorphic = false;
  int integration_steps = 7;
  std::uint64_t seed = 0;

  int levels() const { return extractor.levels(); }
  void validate() const;
};

template <typename T>
struct LevelTrace {
  Var<T> local_displacement;  // attention output u_i
  Var<T> weights;             // [N, w^d]
};

template <typename T>
struct Registration {
  TransformGrid<T> phi;                      // finest level
  std::vector<TransformGrid<T>> transforms;  // per level, coarsest first; back() is phi
  std::vector<LevelTrace<T>> traces;         // same order
};

// One coarse-to-fine step: the local transform built from u and beta,
// composed with the already upsampled coarser transform (nullptr at the
// coarsest level).
template <typename T>
TransformGrid<T> advance_level(const TransformGrid<T>* prev_upsampled, const Var<T>& u, const Var<T>& beta,
                               bool diffeomorphic, int integration_steps);

template <typename T>
class VfaModel {
 public:
  VfaModel() = default;
  VfaModel(const ModelConfig& cfg, int dims);

  // fixed, moving: [1, spatial...], extents divisible by 2^(L-1).
  Registration<T> register_pair(const Var<T>& fixed, const Var<T>& moving) const;

  const ModelConfig& config() const { return cfg_; }
  int dims() const { return dims_; }
  const Var<T>& beta() const { return beta_; }
  void set_beta(double beta);

  // Deterministic order; names are stable across runs and used by
  // checkpoints.
  NamedParams<T> parameters() const;
  std::int64_t parameter_count() const;
  std::string describe() const;

 private:
  struct Conv {
    Var<T> w, b;
  };
  ModelConfig cfg_;
  int dims_ = 0;
  FeatureExtractor<T> fixed_net_;
  FeatureExtractor<T> moving_net_;  // unused when weights are shared
  std::vector<Conv> match_fixed_;
  std::vector<Conv> match_moving_;
  Var<T> beta_;
};

}  // namespace vfa
