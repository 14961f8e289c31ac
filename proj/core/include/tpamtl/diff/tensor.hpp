#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpamtl {

#ifdef TPAMTL_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

}  // namespace tpamtl

namespace tpamtl::diff {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One vertex of the dynamic computation graph. `backward` reads this node's
// grad and accumulates into the grads of `parents`.
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Real* grad_buffer();
};

// Handle to a node. Copies alias the same storage, like a framework tensor;
// use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;

  std::span<const Real> values() const;
  std::span<Real> mutable_values();
  Real item() const;
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  // Seeds d(self)/d(self) = 1; the tensor must hold exactly one value.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default; a NoGradGuard disables it for the current
// thread until destroyed.
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

// Builds an op result. The backward closure is attached only when recording
// is enabled and at least one parent participates in differentiation.
Tensor make_result(Shape shape, std::vector<Real> value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace tpamtl::diff
