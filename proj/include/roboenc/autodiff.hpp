#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "roboenc/tensor.hpp"

namespace roboenc {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// tape is alive.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Result of Tape::backward. Nodes not reached from the root (or not depending
// on any leaf) report a zero gradient of their own shape.
class Gradients {
 public:
  Tensor of(Var v) const;
  bool reached(Var v) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  // Accumulates the contribution of `out_grad` into each parent gradient.
  // Entries of `parent_grads` are null for parents that need no gradient.
  using BackwardFn = std::function<void(const Tape& tape, const Tensor& out_grad,
                                        std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf (weights, the designated input).
  Var leaf(Tensor value);
  // Non-differentiable input.
  Var constant(Tensor value);

  // Appends an op result. `value` must already be finite.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reverse sweep from a scalar root. Nodes are visited once each, in reverse
  // recording order, which is a reverse topological order.
  Gradients backward(Var root) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Primitive operations. Every result is recorded on the operands' tape and is
// checked for finiteness (NumericError otherwise).
namespace ad {

Var matmul(Var a, Var b);                  // [n,k] x [k,m] -> [n,m]
Var add(Var a, Var b);                     // same shape, or b = row vector over a's last axis
Var sub(Var a, Var b);                     // same shape
Var mul(Var a, Var b);                     // elementwise, same shape
Var scale(Var a, double factor);
Var relu(Var a);
Var square(Var a);
Var log(Var a);
Var softmax(Var a);                        // over the last axis
Var log_softmax(Var a);                    // over the last axis
Var sum(Var a);                            // -> scalar
Var mean(Var a);                           // -> scalar
Var reshape(Var a, Shape shape);
// x [N,C,H,W], w [O,C,K,K], bias [O] (optional), no padding.
Var conv2d(Var x, Var w, std::optional<Var> bias, std::size_t stride);
// x [N,k] -> [N] with out[n] = x[n, index[n]].
Var pick(Var x, std::span<const std::size_t> index);
// Each row divided by its l2 norm.
Var l2_normalize_rows(Var x);
// s [N,l] against constant rows [k,l]: out[n,i] = mean_j (s[n,j] - rows[i,j])^2.
Var row_mse(Var s, const Tensor& rows);
// d [N,k] -> [N]: min over i != label[n] of d[n,i], minus d[n,label[n]].
// Ties in the min go to the lowest index.
Var margin(Var d, std::span<const std::size_t> label);
// Elementwise max(x, floor).
Var clamp_min(Var x, double floor);

}  // namespace ad

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  scale,
  relu,
  square,
  log,
  softmax,
  log_softmax,
  sum,
  mean,
  reshape,
  conv2d,
  pick,
  l2_normalize_rows,
  row_mse,
  margin,
  clamp_min,
};

std::string_view op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

// Non-tensor arguments for forward_op.
struct OpAttrs {
  std::size_t stride = 1;
  Shape shape;                      // reshape target
  std::vector<std::size_t> index;   // pick / margin labels
  double scalar = 0.0;              // scale factor / clamp floor
  Tensor rows;                      // row_mse targets
};

// Uniform entry point over the primitives. conv2d takes {x, w} or {x, w, bias}.
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every component.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

}  // namespace roboenc
