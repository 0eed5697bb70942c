#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "focalerrornet/error.hpp"

namespace fen {

/// Dimension list. Volumetric tensors use [batch, channel, depth, height, width].
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  const void* tape = nullptr;  // tape that produced the node; null for leaves
};

/// Shared handle to a dense row-major array.
///
/// Copies alias the same node. Values are treated as immutable once an op has
/// produced them; only leaves (parameters) are written through
/// mutable_data(), and only by their single owner.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the values, detached from any tape.
  Tensor clone(bool requires_grad = false) const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of executed ops for one reverse sweep.
///
/// Ops append themselves in execution order, so inputs always precede the
/// op that consumes them. backward() visits each record exactly once, last
/// to first. A tape is single-owner and single-use.
template <typename T>
class Tape {
 public:
  using Node = TensorNode<T>;
  /// Receives the output node; its grad is populated when called.
  using BackwardFn = std::function<void(const Node& out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }

  /// Wraps an op result. Rejects non-finite values. The backward closure is
  /// stored only when recording and some input requires a gradient.
  Tensor<T> emit(std::string_view op, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and runs the reverse sweep.
  void backward(const Tensor<T>& loss);

 private:
  struct Record {
    std::string_view op;
    std::shared_ptr<Node> output;
    BackwardFn backward;
  };
  bool recording_;
  bool consumed_ = false;
  std::vector<Record> records_;
};

/// Gradient buffer of an op input, allocated on first use; empty span when
/// the input does not require a gradient.
template <typename T>
std::span<T> grad_sink(TensorNode<T>& node) {
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad;
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(out), requires_grad);
}

}  // namespace fen
