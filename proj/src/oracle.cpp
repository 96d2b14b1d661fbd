#include "tgar/oracle.hpp"

#include <cmath>

namespace tgar {

namespace {

// Plain triple loops; deliberately independent of the library kernels.
Tensor mm(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("dense product " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " by " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Tensor c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<real>(s);
    }
  return c;
}

Tensor tr(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

real act(real x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return std::max(x, real{0});
    case Activation::tanh: return std::tanh(x);
    case Activation::leaky_relu: return x >= 0 ? x : x / 5;
  }
  return x;
}

real act_grad(real x, Activation a) {
  switch (a) {
    case Activation::identity: return 1;
    case Activation::relu: return x > 0 ? 1 : 0;
    case Activation::tanh: return 1 / (std::cosh(x) * std::cosh(x));
    case Activation::leaky_relu: return x > 0 ? real{1} : real{1} / 5;
  }
  return 1;
}

void check_size(std::size_t n) {
  if (n > kOracleMaxNodes) {
    throw RangeError("dense oracle is limited to " + std::to_string(kOracleMaxNodes) + " nodes, got " +
                     std::to_string(n));
  }
}

}  // namespace

DenseGraph dense_graph(const Graph& g, GcnNorm norm, bool add_self_loops) {
  const std::size_t n = g.num_nodes();
  check_size(n);
  DenseGraph dg;
  dg.A = Tensor(n, n);
  for (const auto& e : g.edge_list()) dg.A(e.dst, e.src) += e.weight;
  const bool loops = add_self_loops || norm == GcnNorm::renormalized;
  Tensor a = dg.A;
  if (loops)
    for (std::size_t i = 0; i < n; ++i) a(i, i) += 1;
  std::vector<double> s(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0;
    for (std::size_t j = 0; j < n; ++j) d += a(i, j);
    s[i] = d > 0 ? 1 / std::sqrt(d) : 0;
  }
  Tensor normalized(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) normalized(i, j) = static_cast<real>(s[i] * a(i, j) * s[j]);
  dg.L = Tensor(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) dg.L(i, j) = (i == j ? 1 : 0) - normalized(i, j);
  dg.op = norm == GcnNorm::laplacian ? dg.L : normalized;
  dg.X = g.node_features();
  return dg;
}

DenseTrace dense_gcn_trace(const DenseGraph& dg, const std::vector<Tensor>& weights,
                           const std::vector<Activation>& activations, const std::vector<Tensor>& biases) {
  check_size(dg.size());
  if (weights.empty() || activations.size() != weights.size()) {
    throw ShapeError("dense recursion needs one activation per weight");
  }
  if (!biases.empty() && biases.size() != weights.size()) throw ShapeError("one bias per weight or none");
  DenseTrace t;
  t.H.push_back(dg.X);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    Tensor z = mm(mm(dg.op, t.H.back()), weights[k]);
    if (!biases.empty() && !biases[k].empty()) {
      if (biases[k].cols() != z.cols()) throw ShapeError("bias width mismatch");
      for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t c = 0; c < z.cols(); ++c) z(i, c) += biases[k](0, c);
    }
    Tensor h = z;
    for (auto& v : h.values()) v = act(v, activations[k]);
    t.Z.push_back(std::move(z));
    t.H.push_back(std::move(h));
  }
  return t;
}

Tensor dense_gcn_forward(const DenseGraph& dg, const std::vector<Tensor>& weights,
                         const std::vector<Activation>& activations, const std::vector<Tensor>& biases) {
  return dense_gcn_trace(dg, weights, activations, biases).H.back();
}

DenseGrads dense_backward(const DenseGraph& dg, const DenseTrace& trace, const std::vector<Tensor>& weights,
                          const std::vector<Activation>& activations, const Tensor& upstream) {
  const std::size_t K = weights.size();
  if (trace.Z.size() != K || trace.H.size() != K + 1) throw Error("dense backward needs the forward intermediates");
  if (!upstream.same_shape(trace.H.back())) throw ShapeError("upstream gradient shape mismatch");
  DenseGrads out;
  out.dW.resize(K);
  out.db.resize(K);
  Tensor g = upstream;
  const Tensor opT = tr(dg.op);
  for (std::size_t k = K; k-- > 0;) {
    Tensor dz = g;
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= act_grad(trace.Z[k][i], activations[k]);
    out.dW[k] = mm(tr(mm(dg.op, trace.H[k])), dz);
    out.db[k] = Tensor(1, dz.cols());
    for (std::size_t i = 0; i < dz.rows(); ++i)
      for (std::size_t c = 0; c < dz.cols(); ++c) out.db[k](0, c) += dz(i, c);
    g = mm(mm(opT, dz), tr(weights[k]));
  }
  out.dX = std::move(g);
  return out;
}

double power_iteration(const Tensor& m, int iterations, double tol) {
  const std::size_t n = m.rows();
  if (n == 0 || m.cols() != n) throw ShapeError("power iteration needs a non-empty square matrix");
  check_size(n);
  std::vector<double> v(n), w(n);
  std::uint64_t state = 0x2545f4914f6cdd1dULL;
  for (auto& x : v) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    x = 0.5 + static_cast<double>(state >> 11) * 0x1.0p-53;
  }
  double lambda = 0;
  for (int it = 0; it < iterations; ++it) {
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0) return 0;
    for (auto& x : v) x /= norm;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += m(i, j) * v[j];
      w[i] = s;
    }
    double rq = 0;
    for (std::size_t i = 0; i < n; ++i) rq += v[i] * w[i];
    const double next = std::abs(rq);
    const bool done = it > 0 && std::abs(next - lambda) <= tol * std::max(1.0, next);
    lambda = next;
    v.swap(w);
    if (done) break;
  }
  return lambda;
}

Tensor chebyshev_filter(const DenseGraph& dg, const Tensor& x, const std::vector<double>& theta, double lambda_max) {
  if (!(lambda_max > 0)) throw RangeError("lambda_max must be positive");
  const std::size_t n = dg.size();
  if (x.rows() != n || x.cols() != 1) throw ShapeError("chebyshev_filter expects an N x 1 signal");
  if (theta.empty()) return Tensor(n, 1);
  auto lhat = [&](const Tensor& v) {
    Tensor out = mm(dg.L, v);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<real>(2 * out[i] / lambda_max - v[i]);
    return out;
  };
  Tensor prev = x;
  Tensor result(n, 1);
  for (std::size_t i = 0; i < n; ++i) result[i] = static_cast<real>(theta[0] * x[i]);
  if (theta.size() == 1) return result;
  Tensor cur = lhat(x);
  for (std::size_t k = 1;; ++k) {
    for (std::size_t i = 0; i < n; ++i) result[i] += static_cast<real>(theta[k] * cur[i]);
    if (k + 1 == theta.size()) break;
    Tensor next = lhat(cur);
    for (std::size_t i = 0; i < n; ++i) next[i] = 2 * next[i] - prev[i];
    prev = std::move(cur);
    cur = std::move(next);
  }
  return result;
}

std::vector<double> chebyshev_to_monomial(const std::vector<double>& theta, double lambda_max) {
  if (!(lambda_max > 0)) throw RangeError("lambda_max must be positive");
  const std::size_t K = theta.size();
  std::vector<double> eta(K, 0);
  if (K == 0) return eta;
  // Polynomials in L: T_0 = 1, T_1 = a L - 1, T_k = 2 (a L - 1) T_{k-1} - T_{k-2}.
  const double a = 2 / lambda_max;
  std::vector<double> t0{1}, t1{-1, a};
  eta[0] += theta[0];
  if (K > 1)
    for (std::size_t i = 0; i < t1.size(); ++i) eta[i] += theta[1] * t1[i];
  for (std::size_t k = 2; k < K; ++k) {
    std::vector<double> t2(k + 1, 0);
    for (std::size_t i = 0; i < t1.size(); ++i) {
      t2[i + 1] += 2 * a * t1[i];
      t2[i] -= 2 * t1[i];
    }
    for (std::size_t i = 0; i < t0.size(); ++i) t2[i] -= t0[i];
    for (std::size_t i = 0; i < t2.size(); ++i) eta[i] += theta[k] * t2[i];
    t0 = std::move(t1);
    t1 = std::move(t2);
  }
  return eta;
}

Tensor explicit_polynomial(const DenseGraph& dg, const Tensor& x, const std::vector<double>& eta) {
  const std::size_t n = dg.size();
  if (x.rows() != n || x.cols() != 1) throw ShapeError("explicit_polynomial expects an N x 1 signal");
  Tensor power = identity(n);
  Tensor out(n, 1);
  for (std::size_t k = 0; k < eta.size(); ++k) {
    if (k > 0) power = mm(power, dg.L);
    const Tensor px = mm(power, x);
    for (std::size_t i = 0; i < n; ++i) out[i] += static_cast<real>(eta[k] * px[i]);
  }
  return out;
}

Tensor nested_polynomial(const DenseGraph& dg, const Tensor& x, const std::vector<double>& eta) {
  const std::size_t n = dg.size();
  if (x.rows() != n || x.cols() != 1) throw ShapeError("nested_polynomial expects an N x 1 signal");
  if (eta.empty()) return Tensor(n, 1);
  for (std::size_t k = 0; k + 1 < eta.size(); ++k) {
    if (eta[k] == 0) {
      throw RangeError("nested form needs nonzero coefficients; eta_" + std::to_string(k) + " is 0");
    }
  }
  Tensor acc = x;
  for (std::size_t k = eta.size() - 1; k >= 1; --k) {
    const double ratio = eta[k] / eta[k - 1];
    const Tensor lx = mm(dg.L, acc);
    for (std::size_t i = 0; i < n; ++i) acc[i] = static_cast<real>(x[i] + ratio * lx[i]);
  }
  for (auto& v : acc.values()) v = static_cast<real>(eta[0] * v);
  return acc;
}

}  // namespace tgar
