#include "cbnn/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

#include "cbnn/errors.hpp"

namespace cbnn::autodiff {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::neg: return "neg";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::abs: return "abs";
    case Op::relu: return "relu";
    case Op::rbf_activation: return "rbf_activation";
    case Op::min_const: return "min_const";
    case Op::max_const: return "max_const";
    case Op::clamp: return "clamp";
    case Op::slice: return "slice";
    case Op::transpose: return "transpose";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor* Gradients::find(Var leaf) const {
  auto it = grads_.find(leaf.id());
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& Gradients::at(Var leaf) const {
  const Tensor* g = find(leaf);
  if (!g) throw ContractError("no gradient recorded for node " + std::to_string(leaf.id()));
  return *g;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{Op::leaf, std::move(value), {}, requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, Tensor value, std::initializer_list<Var> parents,
                 BackwardFn backward) {
  Node node{op, std::move(value), {}, false, {}};
  node.parents.reserve(parents.size());
  for (const Var& p : parents) {
    if (&p.tape() != this) throw ContractError("operands live on different tapes");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var root) const {
  if (&root.tape() != this) throw ContractError("root belongs to another tape");
  const Tensor& root_value = nodes_.at(root.id()).value;
  if (root_value.size() != 1) {
    throw ContractError("backward() needs a scalar root, got shape " +
                        shape_string(root_value.shape()));
  }

  std::vector<std::optional<Tensor>> grads(root.id() + 1);
  grads[root.id()] = Tensor::unchecked(root_value.shape(), {1.0});

  std::vector<const Tensor*> inputs;
  std::vector<Tensor*> input_grads;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.requires_grad || node.op == Op::leaf) continue;

    inputs.clear();
    input_grads.clear();
    for (std::size_t p : node.parents) {
      inputs.push_back(&nodes_[p].value);
      if (nodes_[p].requires_grad) {
        if (!grads[p]) {
          grads[p] = Tensor::unchecked(nodes_[p].value.shape(),
                                       std::vector<double>(nodes_[p].value.size(), 0.0));
        }
        input_grads.push_back(&*grads[p]);
      } else {
        input_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{*grads[id], node.value, inputs, input_grads});
  }

  Gradients out;
  for (std::size_t id = 0; id <= root.id(); ++id) {
    const Node& node = nodes_[id];
    if (node.op == Op::leaf && node.requires_grad && grads[id]) {
      out.grads_.emplace(id, std::move(*grads[id]));
    }
  }
  return out;
}

namespace {

struct Dims {
  std::size_t r;
  std::size_t c;
};

Dims dims_of(const Tensor& t) { return {t.rows(), t.cols()}; }

struct Broadcast {
  Dims out;
  Shape shape;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, std::string_view what) {
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  auto join = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(what) + ": cannot broadcast " + shape_string(a.shape()) +
                         " with " + shape_string(b.shape()));
  };
  Dims out{join(da.r, db.r), join(da.c, db.c)};
  const std::size_t rank = std::max(a.rank(), b.rank());
  Shape shape;
  if (rank == 2) shape = {out.r, out.c};
  else if (rank == 1) shape = {out.c};
  if (rank < 2 && out.r != 1) shape = {out.r, out.c};
  return {out, shape};
}

template <typename F>
Tensor elementwise(const Tensor& a, const Tensor& b, const Broadcast& bc, F f) {
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  std::vector<double> out(bc.out.r * bc.out.c);
  for (std::size_t r = 0; r < bc.out.r; ++r) {
    const std::size_t ra = da.r == 1 ? 0 : r;
    const std::size_t rb = db.r == 1 ? 0 : r;
    for (std::size_t c = 0; c < bc.out.c; ++c) {
      const std::size_t ca = da.c == 1 ? 0 : c;
      const std::size_t cb = db.c == 1 ? 0 : c;
      out[r * bc.out.c + c] = f(a[ra * da.c + ca], b[rb * db.c + cb]);
    }
  }
  return Tensor::unchecked(bc.shape, std::move(out));
}

// Adds `scale(a_value, b_value) * grad` into `target`, summing over the
// broadcast extents of the operand the target belongs to.
template <typename F>
void accumulate_broadcast(Tensor& target, const Tensor& grad, const Tensor& a, const Tensor& b,
                          F scale) {
  const Dims dg = dims_of(grad);
  const Dims dt = dims_of(target);
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  for (std::size_t r = 0; r < dg.r; ++r) {
    const std::size_t rt = dt.r == 1 ? 0 : r;
    const std::size_t ra = da.r == 1 ? 0 : r;
    const std::size_t rb = db.r == 1 ? 0 : r;
    for (std::size_t c = 0; c < dg.c; ++c) {
      const std::size_t ct = dt.c == 1 ? 0 : c;
      const std::size_t ca = da.c == 1 ? 0 : c;
      const std::size_t cb = db.c == 1 ? 0 : c;
      target[rt * dt.c + ct] +=
          grad[r * dg.c + c] * scale(a[ra * da.c + ca], b[rb * db.c + cb]);
    }
  }
}

template <typename Fwd, typename Da, typename Db>
Var binary(Op op, Var a, Var b, Fwd fwd, Da da, Db db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, op_name(op));
  Tensor out = elementwise(av, bv, bc, fwd);
  return a.tape().record(op, std::move(out), {a, b}, [da, db](const BackwardArgs& args) {
    const Tensor& x = *args.inputs[0];
    const Tensor& y = *args.inputs[1];
    if (args.input_grads[0]) accumulate_broadcast(*args.input_grads[0], args.grad, x, y, da);
    if (args.input_grads[1]) accumulate_broadcast(*args.input_grads[1], args.grad, x, y, db);
  });
}

// `deriv(x, y)` receives the input and output values.
template <typename Fwd, typename Deriv>
Var unary(Op op, Var a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return a.tape().record(op, Tensor::unchecked(av.shape(), std::move(out)), {a},
                         [deriv](const BackwardArgs& args) {
                           Tensor& g = *args.input_grads[0];
                           const Tensor& x = *args.inputs[0];
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             g[i] += args.grad[i] * deriv(x[i], args.output[i]);
                           }
                         });
}

}  // namespace

Var operator+(Var a, Var b) {
  return binary(
      Op::add, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var operator-(Var a, Var b) {
  return binary(
      Op::sub, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var operator*(Var a, Var b) {
  return binary(
      Op::mul, a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var operator/(Var a, Var b) {
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      Op::div, a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var operator-(Var a) {
  return unary(
      Op::neg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var operator+(Var a, double b) { return a + a.tape().constant(b); }
Var operator+(double a, Var b) { return b.tape().constant(a) + b; }
Var operator-(Var a, double b) { return a - a.tape().constant(b); }
Var operator-(double a, Var b) { return b.tape().constant(a) - b; }
Var operator*(Var a, double b) { return a * a.tape().constant(b); }
Var operator*(double a, Var b) { return b.tape().constant(a) * b; }
Var operator/(Var a, double b) { return a / a.tape().constant(b); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b.values().data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return Tensor::unchecked({m, n}, std::move(out));
}

Var matmul(Var a, Var b) {
  Tensor out = matmul(a.value(), b.value());
  return a.tape().record(Op::matmul, std::move(out), {a, b}, [](const BackwardArgs& args) {
    const Tensor& x = *args.inputs[0];
    const Tensor& y = *args.inputs[1];
    const Tensor& g = args.grad;
    const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    if (Tensor* gx = args.input_grads[0]) {
      // dX = G Y^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
          (*gx)[i * k + p] += acc;
        }
      }
    }
    if (Tensor* gy = args.input_grads[1]) {
      // dY = X^T G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = x[i * k + p];
          if (xip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gy)[p * n + j] += xip * g[i * n + j];
        }
      }
    }
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape().record(Op::sum, Tensor::unchecked({}, {total}), {a},
                         [](const BackwardArgs& args) {
                           Tensor& g = *args.input_grads[0];
                           const double up = args.grad[0];
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
                         });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape().record(Op::mean, Tensor::unchecked({}, {total / static_cast<double>(n)}), {a},
                         [n](const BackwardArgs& args) {
                           Tensor& g = *args.input_grads[0];
                           const double up = args.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
                         });
}

Var exp(Var a) {
  return unary(
      Op::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
  }
  return unary(
      Op::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(
      Op::square, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Kinks resolve to a zero derivative at the tie point.
Var abs(Var a) {
  return unary(
      Op::abs, a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(Var a) {
  return unary(
      Op::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var min_const(Var a, double c) {
  return unary(
      Op::min_const, a, [c](double x) { return std::min(x, c); },
      [c](double x, double) { return x < c ? 1.0 : 0.0; });
}

Var max_const(Var a, double c) {
  return unary(
      Op::max_const, a, [c](double x) { return std::max(x, c); },
      [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lower limit exceeds upper limit");
  return unary(
      Op::clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var rbf_activation(Var x, const Tensor& centers, const Tensor& widths) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  auto check = [cols](const Tensor& t, const char* what) {
    if (t.size() != 1 && t.size() != cols) {
      throw DimensionError(std::string("rbf_activation: ") + what + " must have 1 or " +
                           std::to_string(cols) + " entries");
    }
  };
  check(centers, "centers");
  check(widths, "widths");
  for (double w : widths.values()) {
    if (w == 0.0) throw DomainError("rbf_activation: zero width");
  }
  auto param = [](const Tensor& t, std::size_t c) { return t.size() == 1 ? t[0] : t[c]; };

  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % cols;
    const double d = xv[i] - param(centers, c);
    const double s = param(widths, c);
    out[i] = std::exp(-d * d / (s * s));
  }
  return x.tape().record(
      Op::rbf_activation, Tensor::unchecked(xv.shape(), std::move(out)), {x},
      [centers, widths, cols, param](const BackwardArgs& args) {
        Tensor& g = *args.input_grads[0];
        const Tensor& in = *args.inputs[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t c = i % cols;
          const double d = in[i] - param(centers, c);
          const double s = param(widths, c);
          g[i] += args.grad[i] * (-2.0 * d / (s * s)) * args.output[i];
        }
      });
}

Var slice(Var a, std::size_t offset, Shape shape) {
  const Tensor& av = a.value();
  const std::size_t n = shape_size(shape);
  if (shape.size() > 2) throw DimensionError("slice: rank above 2");
  if (offset + n > av.size()) {
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " +
                         std::to_string(offset + n) + ") exceeds " + std::to_string(av.size()));
  }
  std::vector<double> out(av.values().begin() + static_cast<std::ptrdiff_t>(offset),
                          av.values().begin() + static_cast<std::ptrdiff_t>(offset + n));
  return a.tape().record(Op::slice, Tensor::unchecked(std::move(shape), std::move(out)), {a},
                         [offset](const BackwardArgs& args) {
                           Tensor& g = *args.input_grads[0];
                           for (std::size_t i = 0; i < args.grad.size(); ++i) {
                             g[offset + i] += args.grad[i];
                           }
                         });
}

Var rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw DimensionError("rows: needs a rank-2 tensor");
  if (begin > end || end > av.rows()) {
    throw DimensionError("rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_string(av.shape()));
  }
  const std::size_t cols = av.cols();
  return slice(a, begin * cols, Shape{end - begin, cols});
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw DimensionError("transpose: needs a rank-2 tensor");
  const std::size_t m = av.rows(), n = av.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  return a.tape().record(Op::transpose, Tensor::unchecked({n, m}, std::move(out)), {a},
                         [m, n](const BackwardArgs& args) {
                           Tensor& g = *args.input_grads[0];
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) g[i * n + j] += args.grad[j * m + i];
                           }
                         });
}

}  // namespace cbnn::autodiff
