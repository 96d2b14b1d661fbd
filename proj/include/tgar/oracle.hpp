#pragma once

#include <vector>

#include "tgar/graph.hpp"
#include "tgar/models.hpp"
#include "tgar/tensor.hpp"

namespace tgar {

inline constexpr std::size_t kOracleMaxNodes = 256;

/// Dense matrices built straight from the edge list, without going through the
/// sparse normalization code.
struct DenseGraph {
  /// A(i, j) = total weight of edges j -> i.
  Tensor A;
  /// L = I - D^{-1/2} A' D^{-1/2}, A' = A (+ I with self-loops).
  Tensor L;
  /// Propagation matrix used by the GCN recursion for the chosen mode.
  Tensor op;
  Tensor X;

  std::size_t size() const { return A.rows(); }
};

/// Throws RangeError above kOracleMaxNodes nodes.
DenseGraph dense_graph(const Graph& g, GcnNorm norm, bool add_self_loops);

struct DenseTrace {
  /// Inputs to each layer: H[0] = X, H[k] = output of layer k.
  std::vector<Tensor> H;
  /// Pre-activations per layer.
  std::vector<Tensor> Z;
};

/// H_k = act_k(op H_{k-1} W_k + b_k); `biases` may be empty.
DenseTrace dense_gcn_trace(const DenseGraph& dg, const std::vector<Tensor>& weights,
                           const std::vector<Activation>& activations, const std::vector<Tensor>& biases = {});
Tensor dense_gcn_forward(const DenseGraph& dg, const std::vector<Tensor>& weights,
                         const std::vector<Activation>& activations, const std::vector<Tensor>& biases = {});

struct DenseGrads {
  Tensor dX;
  std::vector<Tensor> dW;
  std::vector<Tensor> db;
};

/// Chain rule through the recursion given dLoss/dH_K.
DenseGrads dense_backward(const DenseGraph& dg, const DenseTrace& trace, const std::vector<Tensor>& weights,
                          const std::vector<Activation>& activations, const Tensor& upstream);

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
double power_iteration(const Tensor& m, int iterations = 100, double tol = 1e-9);

/// sum_k theta_k T_k(L^) x with L^ = 2 L / lambda_max - I, by the three-term
/// recursion (matrix-vector products only). `x` is N x 1.
Tensor chebyshev_filter(const DenseGraph& dg, const Tensor& x, const std::vector<double>& theta, double lambda_max);

/// Coefficients eta with sum theta_k T_k(2L/lambda - I) = sum eta_k L^k.
std::vector<double> chebyshev_to_monomial(const std::vector<double>& theta, double lambda_max);

/// sum_k eta_k L^k x with L^k formed explicitly.
Tensor explicit_polynomial(const DenseGraph& dg, const Tensor& x, const std::vector<double>& eta);

/// The same polynomial in nested form eta_0 (x + r_1 L (x + r_2 L (...)))
/// with r_k = eta_k / eta_{k-1}. Throws RangeError on a zero coefficient
/// before the last.
Tensor nested_polynomial(const DenseGraph& dg, const Tensor& x, const std::vector<double>& eta);

}  // namespace tgar
