#include "tgar/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace tgar {

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::param: return "param";
    case Op::linear: return "linear";
    case Op::add_bias: return "add_bias";
    case Op::relu: return "relu";
    case Op::leaky_relu: return "leaky_relu";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::scale_rows: return "scale_rows";
    case Op::mask: return "mask";
    case Op::xent: return "cross_entropy";
  }
  return "?";
}

Tape::Var Tape::push(Node n, const char* where) {
  if (n.op != Op::param) n.value.check_finite(where);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Tape::Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n), "leaf input");
}

Tape::Var Tape::param(const Tensor* value, ExactTensor* sink) {
  value->check_finite("parameter");
  if (sink && (sink->rows() != value->rows() || sink->cols() != value->cols())) {
    throw ShapeError("parameter gradient sink shape does not match its value");
  }
  Node n;
  n.op = Op::param;
  n.pvalue = value;
  n.sink = sink;
  n.needs_grad = sink != nullptr;
  return push(std::move(n), "parameter");
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Tape::Var Tape::linear(Var x, Var w) {
  Node n;
  n.op = Op::linear;
  n.a = x;
  n.b = w;
  n.value = matmul(val(x), val(w));
  n.needs_grad = nodes_[x].needs_grad || nodes_[w].needs_grad;
  return push(std::move(n), "linear");
}

Tape::Var Tape::add_bias(Var x, Var bias) {
  const Tensor& xv = val(x);
  const Tensor& bv = val(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw ShapeError("add_bias: bias must be 1 x cols(x)");
  Node n;
  n.op = Op::add_bias;
  n.a = x;
  n.b = bias;
  n.value = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) n.value(r, c) += bv[c];
  n.needs_grad = nodes_[x].needs_grad || nodes_[bias].needs_grad;
  return push(std::move(n), "add_bias");
}

Tape::Var Tape::relu(Var x) {
  Node n;
  n.op = Op::relu;
  n.a = x;
  n.value = val(x);
  for (auto& v : n.value.values()) v = v > 0 ? v : real{0};
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "relu");
}

Tape::Var Tape::leaky_relu(Var x, real slope) {
  Node n;
  n.op = Op::leaky_relu;
  n.a = x;
  n.scalar = slope;
  n.value = val(x);
  for (auto& v : n.value.values()) v = v > 0 ? v : slope * v;
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "leaky_relu");
}

Tape::Var Tape::tanh(Var x) {
  Node n;
  n.op = Op::tanh;
  n.a = x;
  n.value = val(x);
  for (auto& v : n.value.values()) v = std::tanh(v);
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "tanh");
}

Tape::Var Tape::exp(Var x) {
  Node n;
  n.op = Op::exp;
  n.a = x;
  n.value = val(x);
  for (auto& v : n.value.values()) v = std::exp(v);
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "exp");
}

Tape::Var Tape::add(Var a, Var b) {
  require_same(val(a), val(b), "add");
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.value = tgar::add(val(a), val(b));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n), "add");
}

Tape::Var Tape::mul(Var a, Var b) {
  require_same(val(a), val(b), "mul");
  Node n;
  n.op = Op::mul;
  n.a = a;
  n.b = b;
  n.value = hadamard(val(a), val(b));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n), "mul");
}

Tape::Var Tape::scale(Var x, real s) {
  Node n;
  n.op = Op::scale;
  n.a = x;
  n.scalar = s;
  n.value = scaled(val(x), s);
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "scale");
}

Tape::Var Tape::scale_rows(Var x, Var col) {
  const Tensor& xv = val(x);
  const Tensor& cv = val(col);
  if (cv.cols() != 1 || cv.rows() != xv.rows()) throw ShapeError("scale_rows: scale must be rows(x) x 1");
  Node n;
  n.op = Op::scale_rows;
  n.a = x;
  n.b = col;
  n.value = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (auto& v : n.value.row(r)) v *= cv[r];
  n.needs_grad = nodes_[x].needs_grad || nodes_[col].needs_grad;
  return push(std::move(n), "scale_rows");
}

Tape::Var Tape::mask(Var x, Tensor m) {
  require_same(val(x), m, "mask");
  Node n;
  n.op = Op::mask;
  n.a = x;
  n.value = hadamard(val(x), m);
  n.aux = std::move(m);
  n.needs_grad = nodes_[x].needs_grad;
  return push(std::move(n), "mask");
}

Tape::Var Tape::cross_entropy_rows(Var logits, std::vector<int> labels) {
  const Tensor& z = val(logits);
  if (labels.size() != z.rows()) throw ShapeError("cross_entropy_rows: one label per row required");
  Node n;
  n.op = Op::xent;
  n.a = logits;
  n.value = Tensor(z.rows(), 1);
  n.aux = Tensor(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
      throw RangeError("label " + std::to_string(y) + " outside [0, " + std::to_string(z.cols()) + ")");
    }
    real mx = z(r, 0);
    for (std::size_t c = 1; c < z.cols(); ++c) mx = std::max(mx, z(r, c));
    real sum = 0;
    for (std::size_t c = 0; c < z.cols(); ++c) sum += std::exp(z(r, c) - mx);
    const real log_sum = std::log(sum);
    for (std::size_t c = 0; c < z.cols(); ++c) n.aux(r, c) = std::exp(z(r, c) - mx - log_sum);
    n.value(r, 0) = log_sum + mx - z(r, y);
  }
  n.labels = std::move(labels);
  n.needs_grad = nodes_[logits].needs_grad;
  return push(std::move(n), "cross_entropy");
}

void Tape::seed(Var v, const Tensor& g) {
  auto& n = nodes_[v];
  const Tensor& shape = val(v);
  if (!g.same_shape(shape)) throw ShapeError("seed gradient shape does not match the seeded value");
  if (n.op == Op::param) {
    if (n.sink) n.sink->add_tensor(g);
    return;
  }
  if (n.grad.empty() && !shape.empty()) n.grad = Tensor(shape.rows(), shape.cols());
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate(Var v, const Tensor& g) {
  auto& n = nodes_[v];
  if (!n.needs_grad) return;
  if (n.op == Op::param) {
    if (n.sink) n.sink->add_tensor(g);
    return;
  }
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward() {
  for (Var id = nodes_.size(); id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty() || n.op == Op::leaf || n.op == Op::param) continue;
    backward_node(id);
  }
}

void Tape::backward_node(Var id) {
  Node& n = nodes_[id];
  const Tensor g = n.grad;
  g.check_finite(std::string("gradient of ") + op_name(n.op));
  const real sign = corrupt_ == op_name(n.op) ? real{-1} : real{1};
  auto flip = [sign](Tensor t) {
    if (sign < 0)
      for (auto& v : t.values()) v = -v;
    return t;
  };

  switch (n.op) {
    case Op::leaf:
    case Op::param:
      break;
    case Op::linear: {
      const Tensor& x = val(n.a);
      const Tensor& w = val(n.b);
      if (nodes_[n.a].needs_grad) accumulate(n.a, flip(matmul_bt(g, w)));
      Node& wn = nodes_[n.b];
      if (wn.needs_grad) {
        if (wn.op == Op::param) {
          // Row-by-row exact accumulation; zero inputs contribute nothing.
          for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t a = 0; a < x.cols(); ++a) {
              const real xv = x(r, a);
              if (xv == real{0}) continue;
              for (std::size_t c = 0; c < g.cols(); ++c) wn.sink->add(a, c, sign * xv * g(r, c));
            }
          }
        } else {
          accumulate(n.b, flip(matmul_at(x, g)));
        }
      }
      break;
    }
    case Op::add_bias: {
      if (nodes_[n.a].needs_grad) accumulate(n.a, flip(g));
      Node& bn = nodes_[n.b];
      if (bn.needs_grad) {
        if (bn.op == Op::param) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) bn.sink->add(0, c, sign * g(r, c));
        } else {
          Tensor gb(1, g.cols());
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
          accumulate(n.b, flip(gb));
        }
      }
      break;
    }
    case Op::relu: {
      Tensor gx = g;
      const Tensor& x = val(n.a);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x[i] > 0 ? gx[i] : real{0};
      accumulate(n.a, flip(std::move(gx)));
      break;
    }
    case Op::leaky_relu: {
      Tensor gx = g;
      const Tensor& x = val(n.a);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x[i] > 0 ? gx[i] : n.scalar * gx[i];
      accumulate(n.a, flip(std::move(gx)));
      break;
    }
    case Op::tanh: {
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 1 - n.value[i] * n.value[i];
      accumulate(n.a, flip(std::move(gx)));
      break;
    }
    case Op::exp: {
      accumulate(n.a, flip(hadamard(g, n.value)));
      break;
    }
    case Op::add: {
      accumulate(n.a, flip(g));
      accumulate(n.b, flip(g));
      break;
    }
    case Op::mul: {
      accumulate(n.a, flip(hadamard(g, val(n.b))));
      accumulate(n.b, flip(hadamard(g, val(n.a))));
      break;
    }
    case Op::scale: {
      accumulate(n.a, flip(scaled(g, n.scalar)));
      break;
    }
    case Op::scale_rows: {
      const Tensor& x = val(n.a);
      const Tensor& c = val(n.b);
      Tensor gx = g;
      Tensor gc(c.rows(), 1);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        real s = 0;
        for (std::size_t k = 0; k < g.cols(); ++k) {
          gx(r, k) *= c[r];
          s += g(r, k) * x(r, k);
        }
        gc[r] = s;
      }
      accumulate(n.a, flip(std::move(gx)));
      accumulate(n.b, flip(std::move(gc)));
      break;
    }
    case Op::mask: {
      accumulate(n.a, flip(hadamard(g, n.aux)));
      break;
    }
    case Op::xent: {
      Tensor gz = n.aux;
      for (std::size_t r = 0; r < gz.rows(); ++r) {
        gz(r, static_cast<std::size_t>(n.labels[r])) -= 1;
        for (auto& v : gz.row(r)) v *= g[r];
      }
      accumulate(n.a, flip(std::move(gz)));
      break;
    }
  }
}

double relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (!analytic.same_shape(numeric)) throw ShapeError("relative_error: shape mismatch");
  const double diff = frobenius_norm(sub(analytic, numeric));
  const double scale = std::max({frobenius_norm(analytic), frobenius_norm(numeric), kGradCheckFloor});
  return diff / scale;
}

namespace {

GradCheckReport finish(const std::vector<Tensor>& analytic, const std::vector<Tensor>& numeric, double tol) {
  GradCheckReport rep;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    rep.per_input.push_back(e);
    rep.max_rel_error = std::max(rep.max_rel_error, e);
  }
  rep.pass = rep.max_rel_error < tol;
  return rep;
}

std::vector<Tensor> central_differences(const std::function<double(const std::vector<Tensor>&)>& loss,
                                        const std::vector<Tensor>& inputs, double eps) {
  std::vector<Tensor> numeric;
  std::vector<Tensor> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor g(inputs[i].rows(), inputs[i].cols());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const real orig = work[i][k];
      work[i][k] = orig + static_cast<real>(eps);
      const double up = loss(work);
      work[i][k] = orig - static_cast<real>(eps);
      const double down = loss(work);
      work[i][k] = orig;
      const double d = (up - down) / (2 * eps);
      if (!std::isfinite(d)) throw NumericError("non-finite finite-difference estimate");
      g[k] = static_cast<real>(d);
    }
    numeric.push_back(std::move(g));
  }
  return numeric;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& build,
                           const std::vector<Tensor>& inputs, double eps, double tol, const std::string& corrupt_op) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Tape::Var> leaves;
    for (const auto& x : xs) leaves.push_back(t.leaf(x, false));
    const auto out = build(t, leaves);
    if (t.value(out).size() != 1) throw ShapeError("grad_check: function output must be a scalar");
    return static_cast<double>(t.value(out)[0]);
  };
  Tape t;
  if (!corrupt_op.empty()) t.corrupt_backward_of(corrupt_op);
  std::vector<Tape::Var> leaves;
  for (const auto& x : inputs) leaves.push_back(t.leaf(x, true));
  const auto out = build(t, leaves);
  if (t.value(out).size() != 1) throw ShapeError("grad_check: function output must be a scalar");
  t.seed(out, Tensor(1, 1, real{1}));
  t.backward();
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& g = t.grad(leaves[i]);
    analytic.push_back(g.empty() ? Tensor(inputs[i].rows(), inputs[i].cols()) : g);
  }
  return finish(analytic, central_differences(evaluate, inputs, eps), tol);
}

GradCheckReport grad_check(const std::function<double(const std::vector<Tensor>&)>& loss,
                           const std::vector<Tensor>& inputs, const std::vector<Tensor>& analytic, double eps,
                           double tol) {
  if (analytic.size() != inputs.size()) throw ShapeError("grad_check: one analytic gradient per input required");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!analytic[i].same_shape(inputs[i])) throw ShapeError("grad_check: analytic gradient shape mismatch");
  }
  return finish(analytic, central_differences(loss, inputs, eps), tol);
}

}  // namespace tgar
