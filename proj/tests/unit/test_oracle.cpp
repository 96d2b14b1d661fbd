#include <doctest.h>

#include <cmath>
#include <random>

#include "tgar/oracle.hpp"
#include "tgar/synthetic.hpp"
#include "tgar/verify.hpp"

using namespace tgar;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor t(r, c);
  for (auto& x : t.values()) x = u(rng);
  return t;
}

Graph undirected_random(std::size_t n, std::size_t pairs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<EdgeInput> e;
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto a = static_cast<node_id>(rng() % n), b = static_cast<node_id>(rng() % n);
    if (a == b) continue;
    e.push_back({a, b, 1});
    e.push_back({b, a, 1});
  }
  return Graph(n, e, random_tensor(n, 3, rng));
}

// sum_k theta_k T_k(L^) x with every T_k formed as a full matrix.
Tensor chebyshev_by_matrices(const Tensor& L, const Tensor& x, const std::vector<double>& theta, double lambda) {
  const std::size_t n = L.rows();
  Tensor Lh = scaled(L, 2 / lambda);
  for (std::size_t i = 0; i < n; ++i) Lh(i, i) -= 1;
  Tensor prev = identity(n), cur = Lh;
  Tensor out = scaled(x, theta[0]);
  for (std::size_t k = 1; k < theta.size(); ++k) {
    if (k > 1) {
      Tensor next = scaled(matmul(Lh, cur), 2);
      for (std::size_t i = 0; i < next.size(); ++i) next.values()[i] -= prev.values()[i];
      prev = cur;
      cur = next;
    }
    const Tensor term = scaled(matmul(cur, x), theta[k]);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += term.values()[i];
  }
  return out;
}

double sum_weighted(const Tensor& a, const Tensor& probe) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * probe.values()[i];
  return s;
}

ModelSpec gcn_spec(std::size_t in, std::vector<std::size_t> dims, GcnNorm norm, bool loops, bool bias) {
  ModelSpec s;
  s.input_dim = in;
  s.class_count = dims.back();
  s.decoder = DecoderKind::identity;
  s.keep_prob = 1;
  s.l2 = 0;
  s.norm = norm;
  s.add_self_loops = loops;
  for (std::size_t k = 0; k < dims.size(); ++k)
    s.layers.push_back({LayerKind::gcn, dims[k], k + 1 == dims.size() ? Activation::identity : Activation::tanh, bias});
  return s;
}

}  // namespace

TEST_CASE("identity weights with L = I return X") {
  // No edges and laplacian mode: L is the identity.
  std::mt19937_64 rng(0);
  const Graph g(4, {}, random_tensor(4, 3, rng));
  const auto dg = dense_graph(g, GcnNorm::laplacian, false);
  CHECK(dg.L == identity(4));
  const auto H = dense_gcn_forward(dg, {identity(3), identity(3)}, {Activation::identity, Activation::identity});
  CHECK(H == g.node_features());
}

TEST_CASE("two nodes, one unit edge each way, by hand") {
  // Renormalized with self-loops: every entry of the operator is 1/2.
  const Graph g(2, {{0, 1, 1}, {1, 0, 1}}, Tensor::from_rows({{1, 2}, {3, 4}}));
  const auto dg = dense_graph(g, GcnNorm::renormalized, false);
  const Tensor W = Tensor::from_rows({{1, -1}, {0, 2}});
  // op X = [[2, 3], [2, 3]]; times W = [[2, 4], [2, 4]].
  CHECK(max_abs_diff(dense_gcn_forward(dg, {W}, {Activation::identity}), Tensor::from_rows({{2, 4}, {2, 4}})) < 1e-14);
  // Signed laplacian without self-loops: L = [[1, -1], [-1, 1]].
  const auto dl = dense_graph(g, GcnNorm::laplacian, false);
  CHECK(dl.L == Tensor::from_rows({{1, -1}, {-1, 1}}));
  // L X = [[-2, -2], [2, 2]]; times W = [[-2, -2], [2, 2]].
  CHECK(dense_gcn_forward(dl, {W}, {Activation::identity}) == Tensor::from_rows({{-2, -2}, {2, 2}}));
}

TEST_CASE("engine forward matches the dense recursion on random graphs") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = random_graph({6 + seed * 2, 20 + seed * 6, 3, 0, seed % 2 == 1, seed});
    const auto spec = gcn_spec(3, {4, 2}, seed % 2 ? GcnNorm::laplacian : GcnNorm::renormalized, seed % 3 == 0,
                               seed % 4 == 0);
    const Model model(spec, g);
    const auto params = model.init_params(seed);
    for (std::size_t P : {1, 2, 3}) CHECK(engine_vs_dense(g, spec, params, P) < 1e-10);
  }
}

TEST_CASE("chebyshev filter base cases") {
  std::mt19937_64 rng(1);
  const auto g = undirected_random(6, 8, 1);
  const auto dg = dense_graph(g, GcnNorm::laplacian, false);
  const Tensor x = random_tensor(6, 1, rng);
  const double lambda = power_iteration(dg.L);
  CHECK(max_abs_diff(chebyshev_filter(dg, x, {0.7}, lambda), scaled(x, 0.7)) < 1e-15);
  Tensor Lh = scaled(dg.L, 2 / lambda);
  for (std::size_t i = 0; i < 6; ++i) Lh(i, i) -= 1;
  Tensor expected = scaled(matmul(Lh, x), -1.3);
  for (std::size_t i = 0; i < 6; ++i) expected(i, 0) += 0.7 * x(i, 0);
  CHECK(max_abs_diff(chebyshev_filter(dg, x, {0.7, -1.3}, lambda), expected) < 1e-14);
}

TEST_CASE("chebyshev filter equals the monomial polynomial after conversion") {
  std::mt19937_64 rng(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = undirected_random(6, 9, seed);
    const auto dg = dense_graph(g, seed % 2 ? GcnNorm::laplacian : GcnNorm::renormalized, seed % 3 == 0);
    const Tensor x = random_tensor(6, 1, rng);
    std::vector<double> theta(1 + seed % 5);
    for (auto& t : theta) t = std::uniform_real_distribution<double>(-1, 1)(rng);
    const double lambda = power_iteration(dg.L);
    const auto cheb = chebyshev_filter(dg, x, theta, lambda);
    CHECK(max_abs_diff(cheb, chebyshev_by_matrices(dg.L, x, theta, lambda)) < 1e-10);
    const auto eta = chebyshev_to_monomial(theta, lambda);
    CHECK(max_abs_diff(cheb, explicit_polynomial(dg, x, eta)) < 1e-10);
  }
}

TEST_CASE("nested polynomial form") {
  std::mt19937_64 rng(3);
  const auto g = undirected_random(6, 9, 3);
  const auto dg = dense_graph(g, GcnNorm::laplacian, false);
  const Tensor x = random_tensor(6, 1, rng);
  const std::vector<double> eta{0.9, -0.4, 0.25, 0.1};
  CHECK(max_abs_diff(nested_polynomial(dg, x, eta), explicit_polynomial(dg, x, eta)) < 1e-12);
  // A zero in the last slot is fine; anywhere earlier it cannot be converted.
  CHECK_NOTHROW(nested_polynomial(dg, x, {0.9, -0.4, 0}));
  CHECK_THROWS_AS(nested_polynomial(dg, x, {0.9, 0, 0.3}), RangeError);
}

TEST_CASE("dense backward") {
  std::mt19937_64 rng(4);
  const auto g = random_graph({5, 12, 3, 0, true, 4});
  const auto dg = dense_graph(g, GcnNorm::renormalized, false);
  const std::vector<Tensor> W{random_tensor(3, 4, rng), random_tensor(4, 2, rng)};
  const std::vector<Activation> acts{Activation::tanh, Activation::identity};
  const auto trace = dense_gcn_trace(dg, W, acts);
  SUBCASE("zero upstream gives zero gradients") {
    const auto gr = dense_backward(dg, trace, W, acts, Tensor(5, 2));
    CHECK(frobenius_norm(gr.dX) == 0);
    for (const auto& dw : gr.dW) CHECK(frobenius_norm(dw) == 0);
  }
  SUBCASE("finite differences") {
    const Tensor probe = random_tensor(5, 2, rng);
    const auto gr = dense_backward(dg, trace, W, acts, probe);
    const double h = 1e-6;
    auto loss = [&](const DenseGraph& d, const std::vector<Tensor>& w) {
      return sum_weighted(dense_gcn_forward(d, w, acts), probe);
    };
    for (std::size_t k = 0; k < W.size(); ++k) {
      Tensor numeric(W[k].rows(), W[k].cols());
      for (std::size_t i = 0; i < W[k].size(); ++i) {
        auto up = W, down = W;
        up[k].values()[i] += h;
        down[k].values()[i] -= h;
        numeric.values()[i] = (loss(dg, up) - loss(dg, down)) / (2 * h);
      }
      CHECK(relative_error(gr.dW[k], numeric) < 1e-6);
    }
    Tensor numeric(5, 3);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      auto up = dg, down = dg;
      up.X.values()[i] += h;
      down.X.values()[i] -= h;
      numeric.values()[i] = (loss(up, W) - loss(down, W)) / (2 * h);
    }
    CHECK(relative_error(gr.dX, numeric) < 1e-6);
  }
}

TEST_CASE("engine backward matches the dense chain rule") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto d = random_dataset({4 + seed % 5, 10 + seed * 2, 3, 0, seed % 2 == 0, seed}, 3);
    const auto spec = gcn_spec(3, {4, 3}, seed % 2 ? GcnNorm::laplacian : GcnNorm::renormalized, false, false);
    const Model model(spec, d.graph);
    const auto params = model.init_params(seed + 100);
    const auto probe = probe_engine(d, spec, params, 1 + seed % 3);

    const auto dg = dense_graph(d.graph, spec.norm, spec.add_self_loops);
    const std::vector<Tensor> W{params.tensors[params.index_of("layer1.W")],
                                params.tensors[params.index_of("layer2.W")]};
    const std::vector<Activation> acts{Activation::tanh, Activation::identity};
    const auto trace = dense_gcn_trace(dg, W, acts);
    // Mean cross-entropy over the train rows: (softmax - onehot) / n.
    const Tensor& H = trace.H.back();
    Tensor up(H.rows(), H.cols());
    const double n = static_cast<double>(d.train.size());
    for (auto v : d.train) {
      double mx = -INFINITY, z = 0;
      for (std::size_t c = 0; c < H.cols(); ++c) mx = std::max(mx, H(v, c));
      for (std::size_t c = 0; c < H.cols(); ++c) z += std::exp(H(v, c) - mx);
      for (std::size_t c = 0; c < H.cols(); ++c)
        up(v, c) = (std::exp(H(v, c) - mx) / z - (static_cast<int>(c) == d.labels[v] ? 1 : 0)) / n;
    }
    const auto gr = dense_backward(dg, trace, W, acts, up);
    CHECK(max_abs_diff(probe.grads.tensors[params.index_of("layer1.W")], gr.dW[0]) < 1e-8);
    CHECK(max_abs_diff(probe.grads.tensors[params.index_of("layer2.W")], gr.dW[1]) < 1e-8);
    CHECK(max_abs_diff(probe.input_grad, gr.dX) < 1e-8);
  }
}

TEST_CASE("power iteration finds the largest eigenvalue") {
  CHECK(power_iteration(Tensor::from_rows({{2, 1}, {1, 2}})) == doctest::Approx(3).epsilon(1e-8));
  Tensor d(4, 4);
  d(0, 0) = 1;
  d(1, 1) = -5;
  d(2, 2) = 2;
  d(3, 3) = 0.5;
  CHECK(power_iteration(d) == doctest::Approx(5).epsilon(1e-8));
  // The normalized laplacian spectrum lies in [0, 2].
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto dg = dense_graph(undirected_random(10, 15, seed), GcnNorm::laplacian, false);
    const double l = power_iteration(dg.L);
    CHECK(l > 0);
    CHECK(l <= 2 + 1e-9);
  }
}

TEST_CASE("chebyshev terms stay bounded for k up to 8") {
  // With the spectrum of L^ in [-1, 1], |T_k| <= 1 there, so ||T_k(L^) x||_2 <= ||x||_2.
  std::mt19937_64 rng(6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto dg = dense_graph(undirected_random(12, 20, seed), GcnNorm::laplacian, seed % 2 == 0);
    const double lambda = power_iteration(dg.L);
    const Tensor x = random_tensor(12, 1, rng);
    for (std::size_t k = 0; k <= 8; ++k) {
      std::vector<double> theta(k + 1, 0);
      theta[k] = 1;
      const auto y = chebyshev_filter(dg, x, theta, lambda);
      CAPTURE(k);
      CHECK(frobenius_norm(y) <= frobenius_norm(x) * (1 + 1e-6));
    }
  }
}

TEST_CASE("dense oracle refuses large graphs") {
  const Graph g(kOracleMaxNodes + 1, {});
  CHECK_THROWS_AS(dense_graph(g, GcnNorm::laplacian, false), RangeError);
  CHECK_NOTHROW(dense_graph(Graph(kOracleMaxNodes, {}), GcnNorm::laplacian, false));
}

TEST_CASE("gradient check suite") {
  const auto results = gradcheck_suite(0);
  CHECK(results.size() >= 12);
  for (const auto& r : results) {
    CAPTURE(r.name);
    CHECK(r.pass);
  }
  CHECK(gradcheck_names().size() == results.size());
}
