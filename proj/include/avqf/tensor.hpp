#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "avqf/error.hpp"
#include "avqf/rng.hpp"

namespace avqf {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* who) {
  for (size_t e : s) {
    if (e == 0) {
      throw ShapeError(std::string(who) + ": invalid shape " + shape_str(s) +
                       " (every extent must be >= 1)");
    }
  }
}

// One node of the computation graph. Holds the value, an optional gradient
// accumulator, and the closure that pushes this node's gradient into its
// parents. The gradient vector of a frozen (requires_grad == false) node is
// never allocated.
template <typename Real>
struct GraphNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<GraphNode<Real>>> parents;
  std::function<void(GraphNode<Real>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
  }
};

// Dense row-major tensor with value semantics over a shared graph node.
// Copies alias the same storage; tensors are immutable after creation except
// for the gradient slot and explicit parameter updates between steps.
template <typename Real>
class Tensor {
 public:
  using Node = GraphNode<Real>;

  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, Real(0), requires_grad);
  }

  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, Real(1), requires_grad);
  }

  static Tensor full(const Shape& shape, Real value, bool requires_grad = false) {
    check_shape_valid(shape, "Tensor::full");
    Tensor t;
    t.node_->shape = shape;
    t.node_->data.assign(shape_numel(shape), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(const Shape& shape, std::vector<Real> data,
                          bool requires_grad = false) {
    check_shape_valid(shape, "Tensor::from_data");
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("Tensor::from_data: shape " + shape_str(shape) +
                       " does not match data length " + std::to_string(data.size()));
    }
    Tensor t;
    t.node_->shape = shape;
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Real v) { return from_data({1}, {v}); }

  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t numel() const { return node_->data.size(); }
  size_t extent(size_t axis) const {
    if (axis >= rank()) throw ShapeError("Tensor::extent: axis out of range");
    return node_->shape[axis];
  }

  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }

  Real item() const {
    if (numel() != 1) {
      throw ShapeError("Tensor::item: tensor has " + std::to_string(numel()) +
                       " elements, expected 1");
    }
    return node_->data[0];
  }

  Real& at(size_t i) { return node_->data[i]; }
  Real at(size_t i) const { return node_->data[i]; }
  Real& at(size_t i, size_t j) { return node_->data[i * node_->shape[1] + j]; }
  Real at(size_t i, size_t j) const { return node_->data[i * node_->shape[1] + j]; }
  Real& at(size_t i, size_t j, size_t k) {
    return node_->data[(i * node_->shape[1] + j) * node_->shape[2] + k];
  }
  Real at(size_t i, size_t j, size_t k) const {
    return node_->data[(i * node_->shape[1] + j) * node_->shape[2] + k];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (!v) node_->grad.clear();
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<Real>& grad() {
    if (node_->grad.empty()) throw ValueError("Tensor::grad: gradient slot is absent");
    return node_->grad;
  }
  const std::vector<Real>& grad() const {
    if (node_->grad.empty()) throw ValueError("Tensor::grad: gradient slot is absent");
    return node_->grad;
  }

  // Additive accumulation contract: zeroing is explicit and only meaningful
  // for trainable tensors.
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), Real(0));
  }

  std::shared_ptr<Node> node() const { return node_; }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> d(node_->data.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Other>(node_->data[i]);
    return Tensor<Other>::from_data(node_->shape, std::move(d), node_->requires_grad);
  }

 private:
  std::shared_ptr<Node> node_;
};

enum class InitScheme { kUniformScaled, kZeros, kOnes };

// Deterministic initialization. kUniformScaled draws from U[-a, a] with
// a = sqrt(6 / (fan_in + fan_out)); for rank >= 2 fan_in is the product of
// all extents but the last and fan_out the last extent, for rank 1 both
// equal the length. Draws are computed in double and cast to Real so the
// sequence consumed from rng is identical for every instantiation.
template <typename Real>
Tensor<Real> seeded_init(const Shape& shape, InitScheme scheme, RngState& rng,
                         bool requires_grad = false) {
  check_shape_valid(shape, "seeded_init");
  switch (scheme) {
    case InitScheme::kZeros:
      return Tensor<Real>::zeros(shape, requires_grad);
    case InitScheme::kOnes:
      return Tensor<Real>::ones(shape, requires_grad);
    case InitScheme::kUniformScaled: {
      double fan_in = 1.0, fan_out = 1.0;
      if (shape.size() == 1) {
        fan_in = fan_out = static_cast<double>(shape[0]);
      } else {
        fan_out = static_cast<double>(shape.back());
        for (size_t i = 0; i + 1 < shape.size(); ++i) fan_in *= static_cast<double>(shape[i]);
      }
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::vector<Real> data(shape_numel(shape));
      for (auto& v : data) v = static_cast<Real>(rng.uniform(-a, a));
      return Tensor<Real>::from_data(shape, std::move(data), requires_grad);
    }
  }
  throw ValueError("seeded_init: unknown scheme");
}

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order and accumulates into every trainable
// leaf; frozen leaves are never touched.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing trainable upstream
  using NodeT = GraphNode<Real>;

  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      NodeT* p = n->parents[idx++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += Real(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace avqf
