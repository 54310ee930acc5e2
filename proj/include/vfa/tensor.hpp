#pragma once

// Dense N-d arrays with reverse-mode automatic differentiation.
//
// A Var is an immutable handle to a graph node. Every op allocates a fresh
// output node that remembers its inputs and a closure propagating the output
// gradient back to them; nothing is mutated in place except leaf values by
// the optimizer between steps. backward() runs the closures in reverse
// topological order and accumulates into the grad buffers of leaves with
// requires_grad set. Calling backward() twice without zero_grad() adds the
// two gradients.
//
// Layout conventions used across the library:
//   * row-major storage, last axis fastest;
//   * images and feature maps are [C, s0, s1] (2D) or [C, s0, s1, s2] (3D);
//   * displacement fields are [d, s0, ...] with channel a holding the offset
//     along spatial axis a, in voxels.
//
// Resampling conventions (fixed, tests rely on them bit-exactly):
//   * downsample2 averages disjoint 2^d blocks;
//   * upsample2 is separable linear interpolation with cell-centred
//     alignment: fine index i reads coarse coordinate (i + 0.5) / 2 - 0.5,
//     clamped to [0, n - 1]. Even outputs are 0.75*x[j] + 0.25*x[j-1], odd
//     outputs 0.75*x[j] + 0.25*x[j+1], with indices clamped at the border;
//   * conv zero-pads;
//   * grid_sample clamps coordinates to [0, n - 1] per axis before linear
//     interpolation, so the border value extends outward.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vfa {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class Var {
 public:
  using value_type = T;

  struct Node;
  using BackwardFn = std::function<void(Node&)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
    std::string_view op = "leaf";

    // Gradient buffer of input i, zero-initialised on first use, or nullptr
    // when that input does not require a gradient.
    T* input_grad(std::size_t i);
  };

  Var() = default;

  static Var from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Var zeros(Shape shape, bool requires_grad = false);
  static Var full(Shape shape, T value, bool requires_grad = false);
  static Var scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;  // negative axes count from the end
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<const T> data() const;
  T item() const;  // requires numel() == 1
  T at(std::int64_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;  // empty when no gradient has reached this node
  void zero_grad();
  std::string_view op() const;

  // Leaf-only mutable access, for optimizers and finite-difference probes.
  std::span<T> mutable_data();
  void set_requires_grad(bool flag);

  // Same values, no history.
  Var detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  // Builds an op output. When no input requires a gradient the closure and
  // input references are dropped, so inference keeps no graph.
  static Var make(std::string_view op, Shape shape, std::vector<T> value,
                  std::vector<Var> inputs, BackwardFn backward);

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Populates grad on every requires_grad leaf reachable from loss.
template <typename T>
void backward(const Var<T>& loss);

// ---- elementwise -----------------------------------------------------------
// Binary ops take equal shapes, or one operand with a single element which
// is broadcast.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add_scalar(const Var<T>& a, T c);
template <typename T> Var<T> mul_scalar(const Var<T>& a, T c);
template <typename T> Var<T> neg(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> sqrt(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
// max(a, lo); no gradient where clamped.
template <typename T> Var<T> clamp_min(const Var<T>& a, T lo);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// Reduces one axis away.
template <typename T> Var<T> sum_axis(const Var<T>& a, int axis);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a) { return neg(a); }

// ---- linear algebra --------------------------------------------------------
// Batched product over the last two axes; leading axes broadcast numpy-style.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose_last2(const Var<T>& a);
// exp((x - max) / temperature) normalised along axis.
template <typename T> Var<T> softmax(const Var<T>& x, int axis, T temperature);
// Rows along the last axis scaled to unit Euclidean norm (norm floored at eps).
template <typename T> Var<T> l2_normalize_last(const Var<T>& x, T eps);
// Euclidean norm over the last axis; the gradient at a zero row is zero.
template <typename T> Var<T> norm_last(const Var<T>& x);

// ---- convolution -----------------------------------------------------------
// x: [C_in, spatial...], w: [C_out, C_in, k...], bias: [C_out] or undefined.
// Cross-correlation with zero padding; odd kernels only.
template <typename T>
Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int padding);
// stride 1, padding k/2.
template <typename T>
Var<T> conv_same(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// ---- spatial ---------------------------------------------------------------
template <typename T> Var<T> downsample2(const Var<T>& x);
template <typename T> Var<T> upsample2(const Var<T>& x);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// img: [C, in spatial (d axes)], coords: [d, out spatial (any rank)] holding
// absolute voxel coordinates. Returns [C, out spatial].
template <typename T> Var<T> grid_sample(const Var<T>& img, const Var<T>& coords);

// M: [C, spatial] -> [N, w^d, C]; candidates ordered lexicographically over
// offsets in {-r..r}^d (first spatial axis slowest); border voxels replicate.
template <typename T> Var<T> extract_windows(const Var<T>& m, int window);

// Per-voxel sum over the w^d window clipped to the domain.
template <typename T> Var<T> box_sum(const Var<T>& x, int window);

// x[..., i+1, ...] - x[..., i, ...] along spatial axis `axis` (0-based).
template <typename T> Var<T> diff_forward(const Var<T>& x, int axis);

// Joint histogram of two equally sized value sets in [0, 1], each value
// spread linearly over its two nearest bin centres (triangular Parzen
// window one bin wide). Returns [bins, bins] normalised to total mass 1.
template <typename T> Var<T> soft_joint_histogram(const Var<T>& a, const Var<T>& b, int bins);

// Channel-contiguous index helpers shared by ops and callers.
struct Extents3 {
  int dims = 0;                       // number of spatial axes, 1..3
  std::int64_t n[3] = {1, 1, 1};      // missing axes are 1
  std::int64_t count() const { return n[0] * n[1] * n[2]; }
};
Extents3 spatial_extents(const Shape& shape, int first_axis = 1);
Shape spatial_shape(const Shape& shape, int first_axis = 1);

}  // namespace vfa
