#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation in creation order, which is a topological
// order of the computation graph; backward() walks it once in reverse. Tapes
// are single-threaded. Independent tapes may live on separate threads.

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "evtraffic/kernels.hpp"
#include "evtraffic/tensor.hpp"

namespace evtraffic::ad {

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(kernels::Exec exec = kernels::Exec::parallel) : exec_(exec) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked iff value.requires_grad().
  Var leaf(Tensor value);
  Var variable(Tensor value) { return leaf(std::move(value.set_requires_grad(true))); }
  Var constant(Tensor value) { return leaf(std::move(value.set_requires_grad(false))); }
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  /// Reverse sweep from a scalar loss. Gradients accumulate; call once per tape.
  void backward(const Var& loss);

  /// ∂loss/∂v after backward(); zeros when v received no gradient.
  Tensor grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }
  kernels::Exec exec() const { return exec_; }

  // Operation authoring interface.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of node `id` (valid during backward).
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Zero-initialised accumulation buffer for `id`, or nullptr if `id` does
  /// not require a gradient.
  Tensor* grad_buffer(std::size_t id);
  std::size_t parent(std::size_t id, std::size_t k) const { return nodes_[id].parents[k]; }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  kernels::Exec exec_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------
// Binary arithmetic broadcasts numpy-style (trailing dimensions aligned).

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

/// (m,k)·(k,n), (b,m,k)·(b,k,n), (b,m,k)·(k,n) or (m,k)·(b,k,n).
Var matmul(const Var& a, const Var& b);
/// Swap the last two axes.
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var broadcast_to(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);

Var sum(const Var& a);
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a);
Var mean(const Var& a, std::size_t axis);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var softmax(const Var& a, std::size_t axis);
Var abs(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var lgamma(const Var& a);
/// Clamp to [lo, hi]; the gradient passes only strictly inside the interval.
Var clamp(const Var& a, double lo, double hi);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator/(const Var& a, double s) { return mul_scalar(a, 1.0 / s); }

/// Output shape of numpy-style broadcasting; throws ShapeError naming both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace evtraffic::ad
