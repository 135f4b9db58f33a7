#include "texlora/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace texlora {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

const std::shared_ptr<const std::vector<double>>& zero_scalar_payload() {
  static const auto payload = std::make_shared<const std::vector<double>>(1, 0.0);
  return payload;
}

}  // namespace

Tensor::Tensor() : data_(zero_scalar_payload()) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw TensorError("tensor dimensions must be positive, got " + to_string(shape_));
  }
  if (texlora::numel(shape_) != data.size()) {
    throw TensorError("shape " + to_string(shape_) + " needs " +
                      std::to_string(texlora::numel(shape_)) + " values, got " +
                      std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = texlora::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for shape " +
                      to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = 0;
  return t;
}

Tensor Tape::push(std::string_view op, Tensor value, std::vector<NodeId> parents,
                  BackwardFn backward) {
  if (nodes_.size() >= kNoParent) throw TensorError("tape overflow");
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{op, std::move(parents), value.shape(), std::move(backward)});
  value.tape_ = this;
  value.node_ = id;
  return value;
}

Tensor Tape::leaf(const Tensor& value) { return push("leaf", value.detach(), {}, nullptr); }

Tensor record(std::string_view op, Shape shape, std::vector<double> data,
              std::vector<Tensor> parents, BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Tensor& p : parents) {
    if (!p.tracked()) continue;
    if (tape && tape != p.tape()) {
      throw TensorError(std::string(op) + ": inputs are tracked on different tapes");
    }
    tape = p.tape();
  }
  Tensor value(std::move(shape), std::move(data));
  if (!tape) return value;
  std::vector<NodeId> ids;
  ids.reserve(parents.size());
  for (const Tensor& p : parents) ids.push_back(p.tracked() ? p.node() : Tape::kNoParent);
  return tape->push(op, std::move(value), std::move(ids), std::move(backward));
}

Gradients backward(const Tensor& loss) {
  if (!loss.tracked()) throw TensorError("backward: loss is not on a tape");
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  const Tape& tape = *loss.tape();
  Gradients result;
  result.tape_ = &tape;
  result.grads_.resize(tape.nodes_.size());
  result.shapes_.reserve(tape.nodes_.size());
  for (const auto& node : tape.nodes_) result.shapes_.push_back(node.shape);

  auto& grads = result.grads_;
  grads[loss.node()] = GradBuffer(1, 1.0);
  std::vector<GradBuffer*> refs;
  for (std::size_t id = loss.node() + 1; id-- > 0;) {
    const auto& node = tape.nodes_[id];
    if (grads[id].empty() || !node.backward) continue;
    refs.assign(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const NodeId pid = node.parents[i];
      if (pid == Tape::kNoParent) continue;
      auto& buf = grads[pid];
      if (buf.empty()) buf.assign(numel(tape.nodes_[pid].shape), 0.0);
      refs[i] = &buf;
    }
    node.backward(grads[id], refs);
    GradBuffer().swap(grads[id]);
  }
  return result;
}

Tensor Gradients::of(const Tensor& x) const {
  if (!x.tracked() || x.tape() != tape_) throw TensorError("gradient requested for a tensor not on this tape");
  const auto& buf = grads_.at(x.node());
  if (buf.empty()) return Tensor::zeros(shapes_.at(x.node()));
  return Tensor(shapes_.at(x.node()), buf);
}

bool Gradients::touched(const Tensor& x) const {
  return x.tracked() && x.tape() == tape_ && !grads_.at(x.node()).empty();
}

}  // namespace texlora
