#include "vfa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vfa/error.hpp"

namespace vfa {

template <typename T>
Var<T> ncc_loss(const Var<T>& fixed, const Var<T>& warped, int window, double eps) {
  if (fixed.shape() != warped.shape()) {
    throw DimensionError("ncc_loss: image shapes differ, " + to_string(fixed.shape()) + " vs " +
                         to_string(warped.shape()));
  }
  if (window < 1 || window % 2 == 0) throw ParameterError("ncc_loss: window must be odd, got " + std::to_string(window));
  const Extents3 e = spatial_extents(fixed.shape());
  for (int a = 0; a < e.dims; ++a) {
    if (window > e.n[a]) {
      throw ParameterError("ncc_loss: window " + std::to_string(window) + " exceeds image extent " +
                           std::to_string(e.n[a]) + " along axis " + std::to_string(a));
    }
  }
  const Var<T> counts = box_sum(Var<T>::full(fixed.shape(), T(1)), window);
  const T e_t = static_cast<T>(eps);
  const Var<T> sf = box_sum(fixed, window);
  const Var<T> sw = box_sum(warped, window);
  const Var<T> sff = box_sum(square(fixed), window);
  const Var<T> sww = box_sum(square(warped), window);
  const Var<T> sfw = box_sum(mul(fixed, warped), window);
  const Var<T> cross = sub(sfw, div(mul(sf, sw), counts));
  // Cancellation can push flat-window variances slightly below zero.
  const Var<T> var_f = clamp_min(sub(sff, div(square(sf), counts)), T(0));
  const Var<T> var_w = clamp_min(sub(sww, div(square(sw), counts)), T(0));
  const Var<T> cc = div(add_scalar(cross, e_t), sqrt(mul(add_scalar(var_f, e_t), add_scalar(var_w, e_t))));
  return neg(mean(cc));
}

template <typename T>
Var<T> mi_loss(const Var<T>& fixed, const Var<T>& warped, int bins, double eps) {
  if (bins < 2) throw ParameterError("mi_loss: bins must be >= 2, got " + std::to_string(bins));
  if (fixed.numel() != warped.numel()) {
    throw DimensionError("mi_loss: image shapes differ, " + to_string(fixed.shape()) + " vs " +
                         to_string(warped.shape()));
  }
  const T e_t = static_cast<T>(eps);
  const Var<T> joint = soft_joint_histogram(fixed, warped, bins);
  const Var<T> pf = reshape(sum_axis(joint, 1), Shape{bins, 1});
  const Var<T> pw = reshape(sum_axis(joint, 0), Shape{1, bins});
  const Var<T> outer = matmul(pf, pw);
  const Var<T> mi = sum(mul(joint, sub(log(add_scalar(joint, e_t)), log(add_scalar(outer, e_t)))));
  return neg(mi);
}

template <typename T>
Var<T> diffusion_reg(const Var<T>& u) {
  const Extents3 e = spatial_extents(u.shape());
  Var<T> total;
  for (int a = 0; a < e.dims; ++a) {
    if (e.n[a] < 2) continue;
    const Var<T> term = mean(square(diff_forward(u, a)));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) return mul_scalar(sum(u), T(0));
  return mul_scalar(total, T(1) / static_cast<T>(e.dims));
}

template <typename T>
Var<T> mse_loss(const Var<T>& fixed, const Var<T>& warped) {
  if (fixed.shape() != warped.shape()) {
    throw DimensionError("mse_loss: image shapes differ, " + to_string(fixed.shape()) + " vs " +
                         to_string(warped.shape()));
  }
  return mean(square(sub(fixed, warped)));
}

template <typename T>
Var<T> dice_loss(const Var<T>& fixed_onehot, const Var<T>& warped_soft, double eps) {
  if (fixed_onehot.dim(0) != warped_soft.dim(0)) {
    throw DimensionError("dice_loss: class counts differ, " + std::to_string(fixed_onehot.dim(0)) + " vs " +
                         std::to_string(warped_soft.dim(0)));
  }
  if (fixed_onehot.shape() != warped_soft.shape()) {
    throw DimensionError("dice_loss: label map shapes differ, " + to_string(fixed_onehot.shape()) + " vs " +
                         to_string(warped_soft.shape()));
  }
  const std::int64_t K = fixed_onehot.dim(0);
  const std::int64_t N = fixed_onehot.numel() / K;
  const T e_t = static_cast<T>(eps);
  const Var<T> a = reshape(fixed_onehot, Shape{K, N});
  const Var<T> b = reshape(warped_soft, Shape{K, N});
  const Var<T> inter = sum_axis(mul(a, b), 1);
  const Var<T> sizes = add(sum_axis(a, 1), sum_axis(b, 1));
  const Var<T> dice = div(add_scalar(mul_scalar(inter, T(2)), e_t), add_scalar(sizes, e_t));
  return add_scalar(neg(mean(dice)), T(1));
}

template <typename T>
Var<T> tre_loss(const TransformGrid<T>& phi, const KeypointSet& kp) {
  kp.validate();
  const int d = phi.dims();
  if (kp.dims != d) {
    throw DimensionError("tre_loss: " + std::to_string(kp.dims) + "-D keypoints for a " + std::to_string(d) +
                         "-D transform");
  }
  const auto ext = phi.extents();
  const std::int64_t P = static_cast<std::int64_t>(kp.size());
  if (P == 0) throw UsageError("tre_loss: keypoint set is empty");
  std::ostringstream bad;
  int n_bad = 0;
  for (std::int64_t p = 0; p < P; ++p) {
    for (int a = 0; a < d; ++a) {
      const double c = kp.fixed[p * d + a];
      if (!(c >= 0 && c <= static_cast<double>(ext[a] - 1))) {
        bad << (n_bad++ ? ", " : "") << p;
        break;
      }
    }
  }
  if (n_bad) throw InputError("tre_loss: fixed keypoints outside the image domain: " + bad.str());
  std::vector<T> coords(static_cast<std::size_t>(d * P)), target(static_cast<std::size_t>(d * P)),
      spacing(static_cast<std::size_t>(d * P));
  for (std::int64_t p = 0; p < P; ++p)
    for (int a = 0; a < d; ++a) {
      coords[a * P + p] = static_cast<T>(kp.fixed[p * d + a]);
      target[a * P + p] = static_cast<T>(kp.moving[p * d + a]);
      spacing[a * P + p] = static_cast<T>(kp.spacing[a]);
    }
  const Var<T> c = Var<T>::from(Shape{d, P}, std::move(coords));
  const Var<T> mapped = add(c, grid_sample(phi.displacement(), c));
  const Var<T> err = mul(sub(mapped, Var<T>::from(Shape{d, P}, std::move(target))),
                         Var<T>::from(Shape{d, P}, std::move(spacing)));
  return mean(norm_last(transpose_last2(err)));
}

template <typename T>
Var<T> one_hot(const LabelMap& labels, const std::vector<std::int32_t>& classes) {
  const std::int64_t N = labels.voxels();
  const std::int64_t K = static_cast<std::int64_t>(classes.size());
  if (K == 0) throw UsageError("one_hot: no classes requested");
  std::vector<T> v(static_cast<std::size_t>(K * N), T(0));
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t i = 0; i < N; ++i)
      if (labels.labels[i] == classes[k]) v[k * N + i] = T(1);
  Shape shape{K};
  shape.insert(shape.end(), labels.extents.begin(), labels.extents.end());
  return Var<T>::from(std::move(shape), std::move(v));
}

#define VFA_INSTANTIATE(T)                                                                   \
  template Var<T> ncc_loss(const Var<T>&, const Var<T>&, int, double);                       \
  template Var<T> mi_loss(const Var<T>&, const Var<T>&, int, double);                        \
  template Var<T> diffusion_reg(const Var<T>&);                                              \
  template Var<T> mse_loss(const Var<T>&, const Var<T>&);                                    \
  template Var<T> dice_loss(const Var<T>&, const Var<T>&, double);                           \
  template Var<T> tre_loss(const TransformGrid<T>&, const KeypointSet&);                     \
  template Var<T> one_hot<T>(const LabelMap&, const std::vector<std::int32_t>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
