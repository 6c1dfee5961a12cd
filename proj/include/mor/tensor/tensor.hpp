#pragma once

// Dense tensors with tape-free reverse-mode differentiation. Each result
// node keeps shared ownership of its inputs and a closure that pushes its
// gradient back into them; backward() walks the graph in reverse
// topological order. Graphs are immutable once built.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mor::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::size_t rows() const;  // extent 0 (1 for scalars)
  std::size_t cols() const;  // product of trailing extents

  std::span<const double> data() const;
  // Direct access for initializers, optimizers and finite-difference probes.
  std::span<double> mutable_data();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  double item() const;
  double at(std::size_t i, std::size_t j) const;

  // Seeds d(this)/d(this) = 1; only valid on single-element tensors.
  void backward() const;
  void zero_grad();
  Tensor detach() const;
  Tensor clone() const;
  const char* op() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default; the guard disables it for the current
// thread (inference, decoding, analysis passes).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds a result node; attaches inputs and the backward closure only when
// recording is enabled and at least one input requires a gradient. Throws
// NonFiniteError if any value is NaN/Inf.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, const char* op);

}  // namespace detail

}  // namespace mor::tensor
