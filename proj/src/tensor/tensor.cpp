#include "mor/tensor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mor/errors.hpp"

namespace mor::tensor {

namespace {
thread_local bool g_grad_enabled = true;

const Node& require(const std::shared_ptr<Node>& node) {
  if (!node) throw std::logic_error("use of undefined tensor");
  return *node;
}
}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel_of(shape), fill);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw DimensionError("Tensor::from: " + shape_str(shape) + " needs " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return require(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError("Tensor::dim: axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return require(node_).value.size(); }

std::size_t Tensor::rows() const { return shape().empty() ? 1 : shape()[0]; }

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

std::span<const double> Tensor::data() const { return require(node_).value; }
std::span<double> Tensor::mutable_data() {
  require(node_);
  return node_->value;
}
std::span<const double> Tensor::grad() const { return require(node_).grad; }
std::span<double> Tensor::mutable_grad() {
  require(node_);
  return node_->grad_buffer();
}
bool Tensor::has_grad() const { return !require(node_).grad.empty(); }
bool Tensor::requires_grad() const { return require(node_).requires_grad; }
void Tensor::set_requires_grad(bool flag) {
  require(node_);
  node_->requires_grad = flag;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (i >= rows() || j >= cols()) throw IndexError("Tensor::at out of range");
  return data()[i * cols() + j];
}

const char* Tensor::op() const { return require(node_).op; }

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() requires a single-element tensor");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: parents are finished before their consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

void Tensor::zero_grad() {
  require(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = shape();
  node->value = require(node_).value;
  node->op = "detach";
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  t.node_->op = "leaf";
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, const char* op) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& t : inputs) node->parents.push_back(t.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace mor::tensor
