#include "hypermvp/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hypermvp/error.hpp"

namespace hypermvp::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MatMap as_matrix(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

std::shared_ptr<Tensor> alloc(Shape shape) { return std::make_shared<Tensor>(std::move(shape)); }

void require_rank2(const char* op, const Var& x) {
  if (x.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(x.shape()));
  }
}

[[noreturn]] void domain_violation(const char* op, double value) {
  std::ostringstream os;
  os.precision(17);
  os << op << ": input " << value << " outside the domain";
  throw DomainError(os.str());
}

// ---- broadcasting -------------------------------------------------------

enum class Bcast { Full, Scalar, Row, Col };

struct BinaryPlan {
  Shape out;
  Bcast a = Bcast::Full;
  Bcast b = Bcast::Full;
  std::size_t cols = 1;
};

bool classify(const Shape& in, const Shape& out, Bcast& kind) {
  if (in == out) {
    kind = Bcast::Full;
    return true;
  }
  const std::size_t n = shape_size(in);
  if (n == 1) {
    kind = Bcast::Scalar;
    return true;
  }
  if (out.size() < 2) return false;
  const std::size_t cols = out.back();
  const bool row_like = (in.size() == 1 && in[0] == cols) || (in.size() == 2 && in[0] == 1 && in[1] == cols);
  if (row_like) {
    kind = Bcast::Row;
    return true;
  }
  if (in.size() == out.size() && in.back() == 1 &&
      std::equal(in.begin(), in.end() - 1, out.begin())) {
    kind = Bcast::Col;
    return true;
  }
  return false;
}

BinaryPlan plan_binary(const char* op, const Shape& a, const Shape& b) {
  BinaryPlan plan;
  const bool a_outer = shape_size(a) >= shape_size(b);
  plan.out = a_outer ? a : b;
  bool ok = classify(a, plan.out, plan.a) && classify(b, plan.out, plan.b);
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
  }
  plan.cols = plan.out.empty() ? 1 : plan.out.back();
  return plan;
}

inline std::size_t bidx(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::Full:
      return i;
    case Bcast::Scalar:
      return 0;
    case Bcast::Row:
      return i % cols;
    case Bcast::Col:
      return i / cols;
  }
  return i;
}

template <class F, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, F f, DA da, DB db) {
  const BinaryPlan plan = plan_binary(op, a.shape(), b.shape());
  auto out = alloc(plan.out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t n = out->size();
  for (std::size_t i = 0; i < n; ++i) {
    (*out)[i] = f(av[bidx(plan.a, i, plan.cols)], bv[bidx(plan.b, i, plan.cols)]);
  }
  auto as = a.shared_value();
  auto bs = b.shared_value();
  return make_result(out, {a, b}, [plan, as, bs, da, db](const Tensor& g, GradSink& sink) {
    Tensor* ga = sink.grad(0);
    Tensor* gb = sink.grad(1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = bidx(plan.a, i, plan.cols);
      const std::size_t ib = bidx(plan.b, i, plan.cols);
      const double x = (*as)[ia];
      const double y = (*bs)[ib];
      if (ga) (*ga)[ia] += g[i] * da(x, y);
      if (gb) (*gb)[ib] += g[i] * db(x, y);
    }
  });
}

// d(x, y) receives the input and the op's output value.
template <class F, class D>
Var unary(const Var& x, F f, D d) {
  auto out = alloc(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) (*out)[i] = f(xv[i]);
  auto xs = x.shared_value();
  std::shared_ptr<const Tensor> ys = out;
  return make_result(out, {x}, [xs, ys, d](const Tensor& g, GradSink& sink) {
    if (Tensor* gx = sink.grad(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * d((*xs)[i], (*ys)[i]);
    }
  });
}

Shape last_to_one(const Shape& s) {
  if (s.empty()) return s;
  Shape out = s;
  out.back() = 1;
  return out;
}

}  // namespace

// ---- Var / Tape ---------------------------------------------------------

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}
Var::Var(std::shared_ptr<const Tensor> value) : value_(std::move(value)) {}

std::optional<NodeId> Var::node() const {
  if (!tape_) return std::nullopt;
  return node_;
}

Var constant(Tensor value) { return Var(std::move(value)); }

Tensor* GradSink::grad(std::size_t i) {
  const NodeId id = inputs_[i];
  if (id < 0) return nullptr;
  Tensor& g = grads_[static_cast<std::size_t>(id)];
  if (g.shape() != shapes_[i] || g.size() != shape_size(shapes_[i])) g = Tensor(shapes_[i]);
  return &g;
}

bool Gradients::has(const Var& v) const {
  auto id = v.node();
  return id && static_cast<std::size_t>(*id) < grads_.size() && !grads_[*id].empty();
}

Tensor Gradients::of(const Var& v) const {
  if (has(v)) return grads_[*v.node()];
  return Tensor(v.shape());
}

Var Tape::leaf(Tensor value) {
  Var v(std::move(value));
  v.tape_ = this;
  v.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{});
  return v;
}

Var Tape::record(std::shared_ptr<const Tensor> value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.inputs.reserve(inputs.size());
  node.input_shapes.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tracked() && in.tape() != this) throw Error("operation mixes vars from different tapes");
    node.inputs.push_back(in.tracked() ? in.node_ : -1);
    node.input_shapes.push_back(in.shape());
  }
  node.backward = std::move(backward);
  Var v(std::move(value));
  v.tape_ = this;
  v.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return v;
}

Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this) throw Error("backward: loss was not produced on this tape");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node_)] = Tensor(loss.shape(), 1.0);
  for (NodeId i = loss.node_; i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    Tensor& g = grads[static_cast<std::size_t>(i)];
    if (!node.backward || g.empty()) continue;
    GradSink sink(grads, node.inputs, node.input_shapes);
    node.backward(g, sink);
  }
  return Gradients(std::move(grads));
}

Var make_result(std::shared_ptr<const Tensor> value, std::span<const Var> inputs, BackwardFn backward) {
  Tape* tape = nullptr;
  for (const auto& v : inputs) {
    if (!v.tracked()) continue;
    if (tape && tape != v.tape()) throw Error("operation mixes vars from different tapes");
    tape = v.tape();
  }
  if (!tape) return Var(std::move(value));
  return tape->record(std::move(value), inputs, std::move(backward));
}

Var make_result(std::shared_ptr<const Tensor> value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return make_result(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

// ---- elementwise --------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "subtract", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "multiply", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      "divide", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var broadcast_add(const Var& x, const Var& row) {
  const bool row_like = (row.shape().size() == 1 && row.shape()[0] == x.cols()) ||
                        (row.shape().size() == 2 && row.shape()[0] == 1 && row.shape()[1] == x.cols());
  if (x.shape().size() != 2 || !row_like) {
    throw ShapeError("broadcast-add: incompatible shapes " + to_string(x.shape()) + " and " +
                     to_string(row.shape()));
  }
  return add(x, row);
}

Var add_n(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("add_n: no inputs");
  auto out = std::make_shared<Tensor>(parts[0].value());
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].shape() != out->shape()) {
      throw ShapeError("add_n: incompatible shapes " + to_string(out->shape()) + " and " + to_string(parts[i].shape()));
    }
    const Tensor& v = parts[i].value();
    for (std::size_t k = 0; k < v.size(); ++k) (*out)[k] += v[k];
  }
  const std::size_t n = parts.size();
  return make_result(out, parts, [n](const Tensor& g, GradSink& sink) {
    for (std::size_t i = 0; i < n; ++i)
      if (Tensor* gi = sink.grad(i))
        for (std::size_t k = 0; k < g.size(); ++k) (*gi)[k] += g[k];
  });
}

Var neg(const Var& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var scale(const Var& x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var abs(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); }, [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(const Var& x) {
  for (double v : x.value().values())
    if (v < 0.0) domain_violation("sqrt", v);
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  for (double v : x.value().values())
    if (!(v > 0.0)) domain_violation("log", v);
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sinh(const Var& x) {
  return unary(x, [](double v) { return std::sinh(v); }, [](double v, double) { return std::cosh(v); });
}

Var cosh(const Var& x) {
  return unary(x, [](double v) { return std::cosh(v); }, [](double v, double) { return std::sinh(v); });
}

Var acosh(const Var& x) {
  for (double v : x.value().values())
    if (!(v >= 1.0)) domain_violation("inverse-hyperbolic-cosine", v);
  return unary(
      x, [](double v) { return std::acosh(v); }, [](double v, double) { return 1.0 / std::sqrt(v * v - 1.0); });
}

Var asin(const Var& x) {
  for (double v : x.value().values())
    if (!(std::abs(v) <= 1.0)) domain_violation("inverse-sine", v);
  // The derivative is unbounded at |x| = 1; those points contribute no gradient.
  return unary(
      x, [](double v) { return std::asin(v); },
      [](double v, double) { return std::abs(v) < 1.0 ? 1.0 / std::sqrt(1.0 - v * v) : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Var sinhc(const Var& x) {
  return unary(
      x,
      [](double v) { return std::abs(v) < 1e-6 ? 1.0 : std::sinh(v) / v; },
      [](double v, double) {
        if (std::abs(v) < 1e-3) return v / 3.0 + v * v * v / 30.0;
        return (v * std::cosh(v) - std::sinh(v)) / (v * v);
      });
}

Var acosh_sqrt1p_over(const Var& x) {
  for (double v : x.value().values())
    if (!(v >= 0.0)) domain_violation("log-map scale", v);
  // acosh(sqrt(x^2 + 1)) == asinh(x) for x >= 0; asinh has no cancellation near x = 0.
  return unary(
      x,
      [](double v) { return v < 1e-6 ? 1.0 : std::asinh(v) / v; },
      [](double v, double) {
        if (v < 1e-3) return -v / 3.0 + 0.3 * v * v * v;
        return (v / std::sqrt(1.0 + v * v) - std::asinh(v)) / (v * v);
      });
}

Var acosh_clamped(const Var& x) {
  return unary(
      x, [](double v) { return v > 1.0 ? std::acosh(v) : 0.0; },
      [](double v, double) { return v > 1.0 + 1e-12 ? 1.0 / std::sqrt(v * v - 1.0) : 0.0; });
}

// ---- reductions ---------------------------------------------------------

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  auto out = std::make_shared<Tensor>(Tensor::scalar(s));
  return make_result(out, {x}, [](const Tensor& g, GradSink& sink) {
    if (Tensor* gx = sink.grad(0))
      for (auto& v : gx->values()) v += g[0];
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_last(const Var& x) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  auto out = alloc(last_to_one(x.shape()));
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += xv[r * cols + c];
    (*out)[r] = s;
  }
  return make_result(out, {x}, [rows, cols](const Tensor& g, GradSink& sink) {
    if (Tensor* gx = sink.grad(0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r];
  });
}

Var mean_last(const Var& x) {
  if (x.cols() == 0) throw ShapeError("mean over an empty last axis");
  return scale(sum_last(x), 1.0 / static_cast<double>(x.cols()));
}

Var l2_norm(const Var& x, double eps) { return sqrt(add_scalar(sum_last(square(x)), eps)); }

Var softmax_last(const Var& x) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  auto out = alloc(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out->data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  std::shared_ptr<const Tensor> ys = out;
  return make_result(out, {x}, [ys, rows, cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = ys->data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
      double* o = gx->data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) o[c] += y[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw ShapeError("layer-normalization: input " + to_string(x.shape()) + " with gain " +
                     to_string(gain.shape()) + " and bias " + to_string(bias.shape()));
  }
  auto out = alloc(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      (*out)[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  auto gs = gain.shared_value();
  return make_result(out, {x, gain, bias}, [xhat, inv_std, gs, rows, cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    Tensor* gg = sink.grad(1);
    Tensor* gb = sink.grad(2);
    const double n = static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * cols;
      const double* h = xhat->data() + r * cols;
      if (gg)
        for (std::size_t c = 0; c < cols; ++c) (*gg)[c] += gr[c] * h[c];
      if (gb)
        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += gr[c];
      if (gx) {
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double dh = gr[c] * (*gs)[c];
          mean_dh += dh;
          mean_dh_h += dh * h[c];
        }
        mean_dh /= n;
        mean_dh_h /= n;
        double* o = gx->data() + r * cols;
        const double is = (*inv_std)[r];
        for (std::size_t c = 0; c < cols; ++c) {
          const double dh = gr[c] * (*gs)[c];
          o[c] += is * (dh - mean_dh - h[c] * mean_dh_h);
        }
      }
    }
  });
}

// ---- linear algebra & layout --------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_rank2("matrix-multiply", a);
  require_rank2("matrix-multiply", b);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matrix-multiply: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  auto out = alloc({a.shape()[0], b.shape()[1]});
  as_matrix(*out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  auto as = a.shared_value();
  auto bs = b.shared_value();
  return make_result(out, {a, b}, [as, bs](const Tensor& g, GradSink& sink) {
    if (Tensor* ga = sink.grad(0)) as_matrix(*ga).noalias() += as_matrix(g) * as_matrix(*bs).transpose();
    if (Tensor* gb = sink.grad(1)) as_matrix(*gb).noalias() += as_matrix(*as).transpose() * as_matrix(g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank2("matrix-multiply", a);
  require_rank2("matrix-multiply", b);
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("matrix-multiply (transposed rhs): incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  auto out = alloc({a.shape()[0], b.shape()[0]});
  as_matrix(*out).noalias() = as_matrix(a.value()) * as_matrix(b.value()).transpose();
  auto as = a.shared_value();
  auto bs = b.shared_value();
  return make_result(out, {a, b}, [as, bs](const Tensor& g, GradSink& sink) {
    if (Tensor* ga = sink.grad(0)) as_matrix(*ga).noalias() += as_matrix(g) * as_matrix(*bs);
    if (Tensor* gb = sink.grad(1)) as_matrix(*gb).noalias() += as_matrix(g).transpose() * as_matrix(*as);
  });
}

Var transpose(const Var& x) {
  require_rank2("transpose", x);
  const std::size_t r = x.shape()[0];
  const std::size_t c = x.shape()[1];
  auto out = alloc({c, r});
  as_matrix(*out) = as_matrix(x.value()).transpose();
  return make_result(out, {x}, [](const Tensor& g, GradSink& sink) {
    if (Tensor* gx = sink.grad(0)) as_matrix(*gx) += as_matrix(g).transpose();
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto out = std::make_shared<Tensor>(x.value().reshaped(std::move(shape)));
  return make_result(out, {x}, [](const Tensor& g, GradSink& sink) {
    if (Tensor* gx = sink.grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concatenate: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concatenate: axis must be 0 or 1");
  for (const auto& p : parts) require_rank2("concatenate", p);
  const std::size_t fixed = parts[0].shape()[1 - axis];
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.shape()[1 - axis] != fixed) {
      throw ShapeError("concatenate: incompatible shapes " + to_string(parts[0].shape()) + " and " +
                       to_string(p.shape()));
    }
    extents.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  const std::size_t out_rows = axis == 0 ? total : fixed;
  const std::size_t out_cols = axis == 0 ? fixed : total;
  auto out = alloc({out_rows, out_cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    if (axis == 0) {
      std::copy(v.values().begin(), v.values().end(), out->data() + offset * out_cols);
      offset += v.shape()[0];
    } else {
      const std::size_t pc = v.shape()[1];
      for (std::size_t r = 0; r < out_rows; ++r)
        std::copy(v.data() + r * pc, v.data() + (r + 1) * pc, out->data() + r * out_cols + offset);
      offset += pc;
    }
  }
  return make_result(out, parts, [extents, axis, out_rows, out_cols](const Tensor& g, GradSink& sink) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < extents.size(); ++i) {
      Tensor* gp = sink.grad(i);
      if (gp) {
        if (axis == 0) {
          const double* src = g.data() + offset * out_cols;
          for (std::size_t k = 0; k < extents[i] * out_cols; ++k) (*gp)[k] += src[k];
        } else {
          const std::size_t pc = extents[i];
          for (std::size_t r = 0; r < out_rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) (*gp)[r * pc + c] += g[r * out_cols + offset + c];
        }
      }
      offset += extents[i];
    }
  });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(const Var& x, int axis, std::size_t begin, std::size_t end) {
  require_rank2("slice", x);
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t rows = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  const std::size_t extent = x.shape()[axis];
  if (begin > end || end > extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                     to_string(x.shape()));
  }
  const std::size_t n = end - begin;
  const std::size_t out_rows = axis == 0 ? n : rows;
  const std::size_t out_cols = axis == 0 ? cols : n;
  auto out = alloc({out_rows, out_cols});
  const Tensor& v = x.value();
  for (std::size_t r = 0; r < out_rows; ++r)
    for (std::size_t c = 0; c < out_cols; ++c)
      (*out)[r * out_cols + c] = axis == 0 ? v[(r + begin) * cols + c] : v[r * cols + c + begin];
  return make_result(out, {x}, [axis, begin, cols, out_rows, out_cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    for (std::size_t r = 0; r < out_rows; ++r)
      for (std::size_t c = 0; c < out_cols; ++c) {
        const std::size_t src = axis == 0 ? (r + begin) * cols + c : r * cols + c + begin;
        (*gx)[src] += g[r * out_cols + c];
      }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> index) {
  require_rank2("gather", x);
  const std::size_t rows = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  for (auto i : index)
    if (i >= rows) throw ShapeError("gather: index " + std::to_string(i) + " out of range for " + to_string(x.shape()));
  auto out = alloc({index.size(), cols});
  const Tensor& v = x.value();
  for (std::size_t k = 0; k < index.size(); ++k)
    std::copy(v.data() + index[k] * cols, v.data() + (index[k] + 1) * cols, out->data() + k * cols);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(out, {x}, [idx = std::move(idx), cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t c = 0; c < cols; ++c) (*gx)[idx[k] * cols + c] += g[k * cols + c];
  });
}

Var gather_last(const Var& x, const IndexMatrix& index) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (index.rows != rows) {
    throw ShapeError("gather: index rows " + std::to_string(index.rows) + " do not match " + to_string(x.shape()));
  }
  for (auto i : index.data)
    if (i >= cols) throw ShapeError("gather: index " + std::to_string(i) + " out of range for " + to_string(x.shape()));
  auto out = alloc({rows, index.cols});
  const Tensor& v = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < index.cols; ++k) (*out)[r * index.cols + k] = v[r * cols + index.at(r, k)];
  return make_result(out, {x}, [index, cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    for (std::size_t r = 0; r < index.rows; ++r)
      for (std::size_t k = 0; k < index.cols; ++k) (*gx)[r * cols + index.at(r, k)] += g[r * index.cols + k];
  });
}

IndexMatrix argsort_last(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("argsort: tensor has no axis");
  IndexMatrix out;
  out.rows = t.rows();
  out.cols = t.cols();
  out.data.resize(out.rows * out.cols);
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = t.row(r);
    for (double v : row)
      if (std::isnan(v)) throw DomainError("argsort: NaN entry in row " + std::to_string(r));
    auto* idx = out.data.data() + r * out.cols;
    std::iota(idx, idx + out.cols, std::size_t{0});
    std::stable_sort(idx, idx + out.cols, [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  }
  return out;
}

}  // namespace hypermvp::ad
