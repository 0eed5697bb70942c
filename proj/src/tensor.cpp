#include "focalerrornet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fen {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  require(fen::numel(shape) == data.size(), ErrorKind::dimension,
          "tensor: shape " + to_string(shape) + " does not match " +
              std::to_string(data.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = fen::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  require(numel() == 1, ErrorKind::dimension,
          "item: tensor has shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->data, requires_grad);
}

template <typename T>
Tensor<T> Tape<T>::emit(std::string_view op, Shape shape, std::vector<T> data,
                        std::initializer_list<const Tensor<T>*> inputs,
                        BackwardFn backward) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      fail(ErrorKind::numeric, std::string(op) + ": non-finite output at index " +
                                   std::to_string(i));
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->tape = this;
  bool needs_grad = false;
  if (recording_) {
    for (const auto* in : inputs) {
      if (in && in->defined() && in->requires_grad()) needs_grad = true;
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    records_.push_back(Record{op, node, std::move(backward)});
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  require(!consumed_, ErrorKind::value, "backward: tape already consumed");
  require(loss.defined() && loss.numel() == 1, ErrorKind::dimension,
          "backward: loss must be a scalar");
  require(loss.node()->tape == this, ErrorKind::value,
          "backward: loss was not produced on this tape");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  auto& seed = loss.node()->grad;
  seed.assign(1, T(1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it->output);
  }
  records_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace fen
