#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "vfa/error.hpp"
#include "vfa/tensor.hpp"

namespace vfa {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Extents3 spatial_extents(const Shape& shape, int first_axis) {
  const int dims = static_cast<int>(shape.size()) - first_axis;
  if (dims < 1 || dims > 3) {
    throw DimensionError("expected 1 to 3 spatial axes after axis " + std::to_string(first_axis) +
                         ", got shape " + to_string(shape));
  }
  Extents3 e;
  e.dims = dims;
  for (int a = 0; a < dims; ++a) e.n[a] = shape[first_axis + a];
  return e;
}

Shape spatial_shape(const Shape& shape, int first_axis) {
  return Shape(shape.begin() + first_axis, shape.end());
}

template <typename T>
T* Var<T>::Node::input_grad(std::size_t i) {
  Node& in = *inputs[i];
  if (!in.requires_grad) return nullptr;
  if (in.grad.empty()) in.grad.assign(in.value.size(), T(0));
  return in.grad.data();
}

template <typename T>
Var<T> Var<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + to_string(shape));
  }
  if (static_cast<std::int64_t>(values.size()) != vfa::numel(shape)) {
    throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(vfa::numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Var<T> Var<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = vfa::numel(shape);
  return from(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), requires_grad);
}

template <typename T>
Var<T> Var<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Var<T>::shape() const {
  return node_->shape;
}

template <typename T>
std::int64_t Var<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::int64_t Var<T>::numel() const {
  return static_cast<std::int64_t>(node_->value.size());
}

template <typename T>
std::span<const T> Var<T>::data() const {
  return node_->value;
}

template <typename T>
T Var<T>::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
bool Var<T>::requires_grad() const {
  return node_->requires_grad;
}

template <typename T>
bool Var<T>::is_leaf() const {
  return !node_->backward;
}

template <typename T>
bool Var<T>::has_grad() const {
  return !node_->grad.empty();
}

template <typename T>
std::span<const T> Var<T>::grad() const {
  return node_->grad;
}

template <typename T>
void Var<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
std::string_view Var<T>::op() const {
  return node_->op;
}

template <typename T>
std::span<T> Var<T>::mutable_data() {
  if (!is_leaf()) throw UsageError("mutable_data() is only available on leaf tensors");
  return node_->value;
}

template <typename T>
void Var<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
}

template <typename T>
Var<T> Var<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
Var<T> Var<T>::make(std::string_view op, Shape shape, std::vector<T> value, std::vector<Var> inputs,
                    BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return v.defined() && v.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node_);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

template <typename T>
void backward(const Var<T>& loss) {
  using Node = typename Var<T>::Node;
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    if (!n->grad.empty()) n->backward(*n);
    // Interior gradients are not kept once propagated.
    if (n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template class Var<float>;
template class Var<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace vfa
