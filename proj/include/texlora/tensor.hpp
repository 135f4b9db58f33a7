#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace texlora {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;
using NodeId = std::uint32_t;

/// Dense row-major f64 array. The payload is immutable once constructed, so
/// copies are cheap and safe to share across threads. A tracked tensor also
/// carries a handle to the tape node that produced it.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  const double* raw() const { return data_->data(); }
  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double item() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  /// Same values, no tape handle.
  Tensor detach() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = 0;
};

using GradBuffer = std::vector<double>;
/// One entry per parent; null when that parent is not tracked.
using GradRefs = std::span<GradBuffer* const>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradRefs parent_grads)>;

class Gradients;

/// Dynamic reverse-mode tape. Nodes are appended during the forward pass, so
/// parents always precede children. A tape must outlive every tensor it tracks.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(NodeId id) const { return nodes_.at(id).op; }

 private:
  friend Tensor record(std::string_view op, Shape shape, std::vector<double> data,
                       std::vector<Tensor> parents, BackwardFn backward);
  friend Gradients backward(const Tensor& loss);
  friend class Gradients;

  static constexpr NodeId kNoParent = std::numeric_limits<NodeId>::max();

  struct Node {
    std::string_view op;
    std::vector<NodeId> parents;
    Shape shape;
    BackwardFn backward;
  };

  Tensor push(std::string_view op, Tensor value, std::vector<NodeId> parents, BackwardFn backward);

  std::vector<Node> nodes_;
};

/// Appends an op result to the tape shared by the tracked parents. When no
/// parent is tracked the result is a plain value and `backward` is dropped.
Tensor record(std::string_view op, Shape shape, std::vector<double> data,
              std::vector<Tensor> parents, BackwardFn backward);

class Gradients {
 public:
  /// Gradient of the loss with respect to `x`; zeros when `x` did not
  /// contribute to the loss.
  Tensor of(const Tensor& x) const;
  bool touched(const Tensor& x) const;

 private:
  friend Gradients backward(const Tensor& loss);

  const Tape* tape_ = nullptr;
  std::vector<GradBuffer> grads_;
  std::vector<Shape> shapes_;
};

/// Reverse sweep from a scalar loss. Gradients are retained for leaves only.
Gradients backward(const Tensor& loss);

}  // namespace texlora
