#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <deque>
#include <unordered_map>
#include <vector>

#include "cbnn/tensor.hpp"

namespace cbnn::autodiff {

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  sum,
  mean,
  neg,
  exp,
  log,
  square,
  abs,
  relu,
  rbf_activation,
  min_const,
  max_const,
  clamp,
  slice,
  transpose,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardArgs {
  const Tensor& grad;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  // nullptr where the input does not require a gradient.
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Leaf gradients produced by Tape::backward. Leaves that do not require
/// gradients, or are not reachable from the root, have no entry.
class Gradients {
 public:
  const Tensor* find(Var leaf) const;
  const Tensor& at(Var leaf) const;
  bool contains(Var leaf) const { return find(leaf) != nullptr; }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the parent
/// of every node has a smaller index and a reverse sweep is a valid
/// topological order. A tape is built fresh for every objective evaluation.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf values are validated (finite, consistent shape) by Tensor itself.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double value) { return leaf(Tensor::scalar(value), false); }

  /// Root must be a single-element tensor.
  Gradients backward(Var root) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  Op op(std::size_t id) const { return nodes_.at(id).op; }

  // Used by the op implementations.
  Var record(Op op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward);

 private:
  struct Node {
    Op op;
    Tensor value;
    std::vector<std::size_t> parents;
    bool requires_grad;
    BackwardFn backward;
  };
  // deque: references to node values stay valid while nodes are appended.
  std::deque<Node> nodes_;
};

// Elementwise binary ops broadcast rank-2 views of their operands: an extent
// of 1 stretches to match the other operand.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);

Var matmul(Var a, Var b);
Var sum(Var a);
Var mean(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var abs(Var a);
Var relu(Var a);
/// exp(-(x - center)^2 / width^2) elementwise. `centers` and `widths` hold
/// either one value or one value per column of `x`.
Var rbf_activation(Var x, const Tensor& centers, const Tensor& widths);
Var min_const(Var a, double c);
Var max_const(Var a, double c);
Var clamp(Var a, double lo, double hi);
/// Contiguous run of `shape_size(shape)` values starting at flat `offset`,
/// reshaped to `shape`.
Var slice(Var a, std::size_t offset, Shape shape);
/// Rows [begin, end) of a rank-2 tensor.
Var rows(Var a, std::size_t begin, std::size_t end);
Var transpose(Var a);

// Forward kernels shared with code that does not need a tape.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace cbnn::autodiff
