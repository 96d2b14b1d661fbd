#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tgar/tensor.hpp"

namespace tgar {

/// Trainable tensor with an exact gradient accumulator.
struct ParamTensor {
  Tensor value;
  ExactTensor grad;

  explicit ParamTensor(Tensor v = {}) : value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad() { grad.clear(); }
};

/// Reverse-mode tape over row-batched tensors.
///
/// Parameters enter through param(): their value is borrowed and their
/// gradient is added into an ExactTensor sink, one row-product at a time, so
/// the sink is independent of how rows were batched. Parameters may only meet
/// batched rows through linear() and add_bias().
class Tape {
 public:
  using Var = std::size_t;

  Var leaf(Tensor value, bool requires_grad = true);
  /// `value` must outlive the tape; `sink` may be null for frozen parameters.
  Var param(const Tensor* value, ExactTensor* sink);

  Var linear(Var x, Var w);
  Var add_bias(Var x, Var bias);
  Var relu(Var x);
  Var leaky_relu(Var x, real slope);
  Var tanh(Var x);
  Var exp(Var x);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, real s);
  /// Row r multiplied by col(r, 0); `col` is n x 1.
  Var scale_rows(Var x, Var col);
  /// Elementwise product with a constant tensor (dropout masks).
  Var mask(Var x, Tensor m);
  /// Per-row negative log softmax at labels[r]; output is n x 1.
  Var cross_entropy_rows(Var logits, std::vector<int> labels);

  const Tensor& value(Var v) const { return nodes_[v].value; }
  /// Gradient of a non-parameter node after backward(); empty if none flowed.
  const Tensor& grad(Var v) const { return nodes_[v].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` to the pending upstream gradient of `v`.
  void seed(Var v, const Tensor& g);
  /// Replays the recorded ops in reverse order of recording.
  void backward();

  /// Flips the sign of every gradient leaving op `kind` (harness self-tests).
  void corrupt_backward_of(const std::string& kind) { corrupt_ = kind; }

 private:
  enum class Op { leaf, param, linear, add_bias, relu, leaky_relu, tanh, exp, add, mul, scale, scale_rows, mask, xent };

  struct Node {
    Op op = Op::leaf;
    Var a = 0;
    Var b = 0;
    Tensor value;
    Tensor grad;
    Tensor aux;
    real scalar = 0;
    std::vector<int> labels;
    const Tensor* pvalue = nullptr;
    ExactTensor* sink = nullptr;
    bool needs_grad = false;
  };

  Var push(Node n, const char* where);
  const Tensor& val(Var v) const { return nodes_[v].pvalue ? *nodes_[v].pvalue : nodes_[v].value; }
  void accumulate(Var v, const Tensor& g);
  void backward_node(Var id);
  static const char* op_name(Op op);

  std::vector<Node> nodes_;
  std::string corrupt_;
};

struct GradCheckReport {
  /// Largest norm-wise relative error over all checked inputs.
  double max_rel_error = 0;
  std::vector<double> per_input;
  bool pass = false;
};

/// Denominator floor for relative_error. Gradients that are exactly zero in
/// theory come out as rounding noise (~1e-17) on one side and 0 on the other;
/// without a floor their ratio is 1.
inline constexpr double kGradCheckFloor = 1e-10;

/// Relative error ||a - b|| / max(||a||, ||b||, kGradCheckFloor).
double relative_error(const Tensor& analytic, const Tensor& numeric);

/// Central-difference check of a scalar function given as a tape builder.
/// `build` receives the tape and one leaf per input and returns a 1x1 output.
GradCheckReport grad_check(const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& build,
                           const std::vector<Tensor>& inputs, double eps, double tol,
                           const std::string& corrupt_op = {});

/// Central-difference check of an arbitrary scalar function against supplied
/// analytic gradients (one per input).
GradCheckReport grad_check(const std::function<double(const std::vector<Tensor>&)>& loss,
                           const std::vector<Tensor>& inputs, const std::vector<Tensor>& analytic, double eps,
                           double tol);

}  // namespace tgar
