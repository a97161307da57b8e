#pragma once

// Define-by-run reverse-mode differentiation over dense f64 tensors.
//
// A Tape records every primitive applied to its Vars in topological order;
// backward() walks it once in reverse. Tapes are single-owner and are rebuilt
// for each forward pass.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "moegrad/tensor.hpp"

namespace moegrad::ad {

using NodeId = std::size_t;

enum class Primitive {
  leaf,
  matmul,
  add,
  sub,
  elementwise_mul,
  scale_by_constant,
  tanh,
  relu,
  exp,
  log,
  square,
  sum,
  softmax_lastdim,
  log_softmax_lastdim,
  select,
  select_row,
  concat,
  stop_gradient,
  scale_gradient,
};

std::string_view primitive_name(Primitive p);

/// Non-tensor operands of a primitive.
struct PrimitiveArgs {
  double factor = 1.0;          // scale_by_constant, scale_gradient
  std::size_t index = 0;        // select, select_row
  std::vector<bool> mask = {};  // softmax_lastdim: entries with false get exactly zero mass
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  NodeId id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradients of one backward pass, keyed by leaf Var.
class GradMap {
 public:
  /// Gradient of the loss with respect to `leaf`; zeros if the leaf is unreachable.
  Tensor of(const Var& leaf) const;
  bool reached(const Var& leaf) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var apply(Primitive kind, std::span<const Var> inputs, PrimitiveArgs args = {});

  /// Exact gradients of a scalar loss. Does not mutate the tape.
  GradMap backward(const Var& loss) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::span<const NodeId> parents(NodeId id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Primitive kind;
    std::vector<NodeId> parents;
    Tensor value;
    PrimitiveArgs args;
    bool requires_grad;
  };

  void backprop_node(const Node& node, const Tensor& grad,
                     std::vector<std::optional<Tensor>>& adj) const;

  std::vector<Node> nodes_;
};

Var apply_primitive(Primitive kind, std::span<const Var> inputs, PrimitiveArgs args = {});

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product of equal shapes, or scalar times tensor (either side).
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var softmax(const Var& a);
Var masked_softmax(const Var& a, std::vector<bool> mask);
Var log_softmax(const Var& a);
/// Element `index` of a rank-1 tensor as a scalar.
Var select(const Var& a, std::size_t index);
Var select_row(const Var& a, std::size_t row);
Var concat(std::span<const Var> parts);
Var stop_gradient(const Var& a);
Var scale_gradient(const Var& a, double factor);

}  // namespace moegrad::ad
