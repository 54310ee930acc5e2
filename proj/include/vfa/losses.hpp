#pragma once

// Differentiable similarity and regularity terms.
//
//   ncc_loss      -mean_x cc(x), cc = (cross + eps) / sqrt((var_f + eps)(var_w + eps))
//                 with window sums clipped to the image, variances floored at 0
//                 (eps = 1e-5)
//   mi_loss       -sum P log((P + eps) / (p_f p_w + eps)) over a soft 2-D histogram
//   diffusion_reg (1/d) sum_a mean((u[x + e_a] - u[x])^2)
//   mse_loss      mean((f - w)^2)
//   dice_loss     1 - mean_k (2 |A_k n B_k| + eps) / (|A_k| + |B_k| + eps), eps = 1e-5
//   tre_loss      mean_i || spacing * (phi(p_i) - q_i) ||

#include "vfa/annotations.hpp"
#include "vfa/geometry.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

inline constexpr double kNccEpsilon = 1e-5;
inline constexpr double kDiceEpsilon = 1e-5;
inline constexpr double kMiEpsilon = 1e-10;

template <typename T>
Var<T> ncc_loss(const Var<T>& fixed, const Var<T>& warped, int window = 9, double eps = kNccEpsilon);

// Intensities are expected in [0, 1]; values outside are clamped into the
// end bins and carry no gradient.
template <typename T>
Var<T> mi_loss(const Var<T>& fixed, const Var<T>& warped, int bins = 32, double eps = kMiEpsilon);

// u: [C, spatial...]; any channel count.
template <typename T>
Var<T> diffusion_reg(const Var<T>& u);

template <typename T>
Var<T> mse_loss(const Var<T>& fixed, const Var<T>& warped);

// One channel per class: fixed_onehot hard, warped_soft from linear warping.
template <typename T>
Var<T> dice_loss(const Var<T>& fixed_onehot, const Var<T>& warped_soft, double eps = kDiceEpsilon);

template <typename T>
Var<T> tre_loss(const TransformGrid<T>& phi, const KeypointSet& keypoints);

// One-hot encoding of the given classes, [classes.size(), extents...].
template <typename T>
Var<T> one_hot(const LabelMap& labels, const std::vector<std::int32_t>& classes);

}  // namespace vfa
