#ifndef ALSEG_NN_VAR_HPP
#define ALSEG_NN_VAR_HPP

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace alseg::nn {

using Index = Eigen::Index;

/// NCHW extent of a dense tensor. Vectors and scalars use trailing ones.
struct Shape {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  Index per_sample() const { return c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) +
         "," + std::to_string(s.w) + ")";
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct Node {
  Shape shape;
  Buffer<Scalar> value;
  Buffer<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Scalar* grad_data() {
    if (grad.size() != value.size()) grad = Buffer<Scalar>::Zero(value.size());
    return grad.data();
  }
  Eigen::Map<Buffer<Scalar>> grad_map() { return {grad_data(), value.size()}; }
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  const Buffer<Scalar>& value() const { return node_->value; }
  Buffer<Scalar>& value() { return node_->value; }
  const Buffer<Scalar>& grad() const { return node_->grad; }
  Buffer<Scalar>& grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Scalar item() const {
    if (node_->value.size() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->value(0);
  }
  Scalar at(Index n, Index c, Index y, Index x) const {
    const auto& s = node_->shape;
    return node_->value(((n * s.c + c) * s.h + y) * s.w + x);
  }

  void zero_grad() { node_->grad.setZero(node_->value.size()); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

template <typename Scalar>
Var<Scalar> constant(const Shape& shape, Buffer<Scalar> values) {
  if (values.size() != shape.size()) {
    throw std::invalid_argument("constant: value count does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = shape;
  node->value = std::move(values);
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
Var<Scalar> constant(const Shape& shape, Scalar fill = Scalar(0)) {
  return constant<Scalar>(shape, Buffer<Scalar>::Constant(shape.size(), fill));
}

/// Trainable leaf.
template <typename Scalar>
Var<Scalar> parameter(const Shape& shape, Buffer<Scalar> values) {
  auto v = constant<Scalar>(shape, std::move(values));
  v.node()->requires_grad = true;
  v.zero_grad();
  return v;
}

/// Same values, cut from the tape.
template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& v) {
  return constant<Scalar>(v.shape(), v.value());
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
Var<Scalar> make_result(const Shape& shape, Buffer<Scalar> value,
                        std::vector<std::shared_ptr<Node<Scalar>>> parents,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = shape;
  node->value = std::move(value);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(node));
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse sweep from a scalar root. Parameter gradients accumulate; callers zero them.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.value().size() != 1) throw std::logic_error("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are transient; leaves keep accumulating.
  for (Node<Scalar>* n : order) {
    if (n->backward_fn) n->grad = Buffer<Scalar>::Zero(n->value.size());
  }
  root.node()->grad_map()(0) += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace alseg::nn

#endif  // ALSEG_NN_VAR_HPP
