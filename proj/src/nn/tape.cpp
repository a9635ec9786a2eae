#include "cotmae/nn/tape.hpp"

#include <stdexcept>

namespace cotmae::nn {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const auto& p : parents) {
      if (&p.tape() != this) throw std::logic_error("op mixes variables from different tapes");
      n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.param != nullptr ? n.param->value : n.value;
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.param != nullptr) return n.param->grad;
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (&root.tape() != this) throw std::logic_error("backward() root belongs to another tape");
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward() needs a scalar root, got " +
                                shape_string(root.value().shape()));
  }
  if (!nodes_[root.id()].needs_grad) return;
  grad(root.id())[0] += T(1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
    // gradients of interior nodes are consumed exactly once
    n.grad = Tensor<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace cotmae::nn
