#pragma once

// Define-by-run reverse-mode differentiation over f64 tensors.
//
// A Var either carries a node on a Tape (and so participates in backward) or
// is a constant. Operations on constants never touch a tape and are pure, so
// the same code paths serve both training and plain evaluation.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hypermvp/tensor.hpp"

namespace hypermvp::ad {

class Tape;
class GradSink;

using NodeId = std::int64_t;
using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

// TapeTensor: a shaped value with an optional handle into the active tape.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);
  explicit Var(std::shared_ptr<const Tensor> value);

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t size() const { return value_->size(); }
  std::size_t rows() const { return value_->rows(); }
  std::size_t cols() const { return value_->cols(); }
  double item() const { return value_->item(); }

  bool tracked() const { return tape_ != nullptr; }
  std::optional<NodeId> node() const;
  Tape* tape() const { return tape_; }

  std::shared_ptr<const Tensor> shared_value() const { return value_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  NodeId node_ = -1;
};

Var constant(Tensor value);

// Accumulates a node's upstream gradient into the gradients of its inputs.
class GradSink {
 public:
  GradSink(std::vector<Tensor>& grads, std::span<const NodeId> inputs,
           std::span<const Shape> shapes)
      : grads_(grads), inputs_(inputs), shapes_(shapes) {}

  // Gradient accumulator for input i, or nullptr when that input is constant.
  Tensor* grad(std::size_t i);

 private:
  std::vector<Tensor>& grads_;
  std::span<const NodeId> inputs_;
  std::span<const Shape> shapes_;
};

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  bool has(const Var& v) const;
  // Gradient of the loss w.r.t. v; zeros of v's shape when the loss does not depend on v.
  Tensor of(const Var& v) const;

 private:
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf node that receives a gradient (a parameter or a probed input).
  Var leaf(Tensor value);

  // Records an op whose inputs include at least one var on this tape.
  Var record(std::shared_ptr<const Tensor> value, std::span<const Var> inputs, BackwardFn backward);

  Gradients backward(const Var& loss) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<NodeId> inputs;
    std::vector<Shape> input_shapes;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Builds the op result: a constant when no input is tracked, otherwise a tape node.
Var make_result(std::shared_ptr<const Tensor> value, std::span<const Var> inputs,
                BackwardFn backward);
Var make_result(std::shared_ptr<const Tensor> value, std::initializer_list<Var> inputs,
                BackwardFn backward);

// Elementwise binary ops. Supported broadcasts: equal shapes, a single-element
// operand, a row vector [C] / [1,C] against [R,C], a column [R,1] against [R,C].
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var broadcast_add(const Var& x, const Var& row);
// Sum of equally shaped operands.
Var add_n(std::span<const Var> parts);

Var neg(const Var& x);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);

Var abs(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sinh(const Var& x);
Var cosh(const Var& x);
Var acosh(const Var& x);
Var asin(const Var& x);
Var sigmoid(const Var& x);
Var relu(const Var& x);
Var gelu(const Var& x);

// Value clamped to [lo, hi]; gradient passes only strictly inside.
Var clamp(const Var& x, double lo, double hi);

// sinh(x)/x with the removable singularity: exactly 1 below |x| < 1e-6.
Var sinhc(const Var& x);
// acosh(sqrt(x^2 + 1)) / x for x >= 0, exactly 1 below x < 1e-6.
Var acosh_sqrt1p_over(const Var& x);
// acosh(max(1, x)); gradient is zero for x <= 1 + 1e-12.
Var acosh_clamped(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// Reductions over the last axis keep it as size 1.
Var sum_last(const Var& x);
Var mean_last(const Var& x);
// sqrt(sum_last(x^2) + eps).
Var l2_norm(const Var& x, double eps = 1e-12);

Var softmax_last(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var matmul(const Var& a, const Var& b);
// a * b^T without materialising the transpose.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

// 2-D concat / slice along axis 0 (rows) or 1 (columns).
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(const Var& x, int axis, std::size_t begin, std::size_t end);

// out[i, :] = x[index[i], :]
Var gather_rows(const Var& x, std::span<const std::size_t> index);
// out[r, k] = x[r, index(r, k)]
Var gather_last(const Var& x, const IndexMatrix& index);

// Ascending stable argsort per row of the last axis. Produces no tape node.
IndexMatrix argsort_last(const Tensor& t);

}  // namespace hypermvp::ad
