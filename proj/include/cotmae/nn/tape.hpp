#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>

#include "cotmae/nn/tensor.hpp"

namespace cotmae::nn {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape over a closed op set.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid topological order. Parameter leaves alias the Parameter's own value
/// and grad; backward() accumulates straight into Parameter::grad.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// A tape that does not record closures is cheaper for inference.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  /// Appends an op output. The node needs a gradient when any parent does;
  /// `fn` runs during backward() only in that case.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const;
  /// Gradient buffer, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  void backward(const Var<T>& root);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace cotmae::nn
