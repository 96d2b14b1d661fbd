#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "tgar/models.hpp"
#include "tgar/oracle.hpp"
#include "tgar/synthetic.hpp"
#include "tgar/verify.hpp"

using namespace tgar;

namespace {

std::vector<node_id> all_nodes(const Graph& g) {
  std::vector<node_id> v(g.num_nodes());
  for (node_id i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

struct Forward {
  Tensor out;
  std::vector<real> attention;
};

Forward forward(const Graph& g, const Model& model, const ParameterSet& params, std::size_t P = 1,
                bool training = false, std::uint64_t seed = 0) {
  const auto plan = partition_even(g, P);
  ViewOptions vo;
  vo.layers = model.layers();
  const auto view = build_view(g, all_nodes(g), vo);
  InMemoryTransport transport(P);
  Execution exec(g, plan, view, transport);
  StageContext ctx;
  ctx.training = training;
  ctx.seed = seed;
  for (int k = 1; k <= model.layers(); ++k) {
    ctx.layer = k;
    exec.forward_layer(model.program(k), params, ctx);
  }
  Forward f;
  f.out = Tensor(g.num_nodes(), model.program(model.layers()).out_dim);
  for (part_id p = 0; p < P; ++p) {
    const auto& nodes = exec.output_nodes(p);
    for (std::size_t i = 0; i < nodes.size(); ++i)
      std::copy(exec.output(p).row(i).begin(), exec.output(p).row(i).end(), f.out.row(nodes[i]).begin());
  }
  if (model.spec().layers[0].kind == LayerKind::gat_edge) f.attention = exec.attention_weights(1);
  return f;
}

ModelSpec gat(std::size_t in, std::size_t out, std::size_t edge_proj) {
  ModelSpec s;
  s.input_dim = in;
  s.class_count = out;
  s.decoder = DecoderKind::identity;
  s.keep_prob = 1;
  s.edge_proj_dim = edge_proj;
  s.layers = {{LayerKind::gat_edge, out, Activation::identity, false}};
  return s;
}

}  // namespace

TEST_CASE("one gcn layer on two nodes equals the dense L X W") {
  const Graph g(2, {{0, 1, 1}, {1, 0, 1}}, Tensor::from_rows({{0.5, -1}, {2, 3}}));
  ModelSpec spec;
  spec.input_dim = 2;
  spec.class_count = 2;
  spec.decoder = DecoderKind::identity;
  spec.norm = GcnNorm::laplacian;
  spec.layers = {{LayerKind::gcn, 2, Activation::identity, false}};
  const Model model(spec, g);
  const auto params = model.init_params(3);
  const auto dg = dense_graph(g, spec.norm, false);
  const Tensor expected = matmul(matmul(dg.L, g.node_features()), params.tensors[0]);
  CHECK(max_abs_diff(forward(g, model, params).out, expected) < 1e-15);
}

TEST_CASE("identity weights with an identity operator apply only the activation") {
  // No edges: the renormalized operator is I.
  const Graph g(3, {}, Tensor::from_rows({{-1, 2}, {0.5, -0.5}, {3, 0}}));
  ModelSpec spec;
  spec.input_dim = 2;
  spec.class_count = 2;
  spec.decoder = DecoderKind::identity;
  spec.layers = {{LayerKind::gcn, 2, Activation::relu, false}};
  const Model model(spec, g);
  ParameterSet params;
  params.add("layer1.W", identity(2));
  const auto out = forward(g, model, params).out;
  CHECK(out == Tensor::from_rows({{0, 2}, {0.5, 0}, {3, 0}}));
}

TEST_CASE("two-layer gcn at citation scale gives N x 7 logits") {
  CitationOptions o;
  o.nodes = 2708;
  o.classes = 7;
  o.feature_dim = 1433;
  o.validation = 500;
  o.test = 1000;
  const auto d = citation_like(o, {true, SelfLoopPolicy::drop, true});
  ModelSpec spec;
  spec.input_dim = 1433;
  spec.class_count = 7;
  spec.decoder = DecoderKind::identity;
  spec.layers = {{LayerKind::gcn, 16, Activation::relu, false}, {LayerKind::gcn, 7, Activation::identity, false}};
  const Model model(spec, d.graph);
  CHECK(model.program(1).in_dim == 1433);
  CHECK(model.program(1).out_dim == 16);
  const auto out = forward(d.graph, model, model.init_params(0)).out;
  CHECK(out.rows() == 2708);
  CHECK(out.cols() == 7);
  CHECK(out.all_finite());
}

TEST_CASE("gcn stacks match the dense recursion for K up to 3") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto g = random_graph({8 + seed * 2, 30 + seed * 5, 3, 0, true, seed});
    ModelSpec spec;
    spec.input_dim = 3;
    spec.class_count = 2;
    spec.decoder = DecoderKind::identity;
    spec.norm = seed % 2 ? GcnNorm::laplacian : GcnNorm::renormalized;
    spec.add_self_loops = seed % 3 == 0;
    const std::size_t K = 1 + seed % 3;
    for (std::size_t k = 0; k < K; ++k)
      spec.layers.push_back({LayerKind::gcn, k + 1 == K ? std::size_t{2} : std::size_t{4},
                             k + 1 == K ? Activation::identity : Activation::relu, seed % 2 == 0});
    const Model model(spec, g);
    const auto params = model.init_params(seed);
    std::vector<Tensor> W, b;
    std::vector<Activation> acts;
    for (std::size_t k = 0; k < K; ++k) {
      const std::string prefix = "layer" + std::to_string(k + 1) + ".";
      W.push_back(params.tensors[params.index_of(prefix + "W")]);
      b.push_back(spec.layers[k].bias ? params.tensors[params.index_of(prefix + "b")] : Tensor{});
      acts.push_back(spec.layers[k].activation);
    }
    const auto dense = dense_gcn_forward(dense_graph(g, spec.norm, spec.add_self_loops), W, acts, b);
    CHECK(max_abs_diff(forward(g, model, params).out, dense) < 1e-10);
  }
}

TEST_CASE("attention over a single in-edge has weight one") {
  Tensor ef(1, 2);
  ef(0, 0) = 5;
  ef(0, 1) = -3;
  const Graph g(2, {{0, 1, 1}}, Tensor::from_rows({{1, 2}, {-4, 0.5}}), ef);
  const Model model(gat(2, 2, 2), g);
  const auto f = forward(g, model, model.init_params(9));
  CHECK(f.attention[0] == 1.0);
}

TEST_CASE("equal scores split attention evenly") {
  // Sources 1 and 2 look identical to node 0, so their scores tie.
  Tensor ef(2, 2, 0.7);
  const Graph g(3, {{1, 0, 1}, {2, 0, 1}}, Tensor::from_rows({{0, 1}, {2, 3}, {2, 3}}), ef);
  const Model model(gat(2, 2, 2), g);
  const auto f = forward(g, model, model.init_params(4));
  CHECK(f.attention[0] == 0.5);
  CHECK(f.attention[1] == 0.5);
}

TEST_CASE("edge attention gradients on five nodes with three edge features") {
  auto d = random_dataset({5, 12, 3, 3, true, 21}, 2);
  ModelSpec spec = gat(3, 2, 0);
  const auto r = engine_gradcheck("gat5", d, spec, 8, 1e-5);
  CHECK(r.pass);
  CHECK(r.value < 1e-5);
}

TEST_CASE("attention needs edge features") {
  const Graph g(2, {{0, 1, 1}}, Tensor(2, 2, 1));
  ModelSpec spec = gat(2, 2, 2);
  CHECK_THROWS_AS(Model(spec, g), ConfigError);
}

TEST_CASE("decoder and loss") {
  ModelSpec spec;
  spec.input_dim = 3;
  spec.class_count = 5;
  spec.layers = {{LayerKind::gcn, 4, Activation::relu, false}};
  spec.decoder_zero_init = true;
  const Graph g(4, {{0, 1, 1}}, Tensor(4, 3, 1));
  const Model model(spec, g);
  const auto params = model.init_params(1);
  std::mt19937_64 rng(2);
  Tensor h(4, 4);
  for (auto& v : h.values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  SUBCASE("zero decoder gives ln C per labeled row") {
    const auto d = decode_and_loss(model, params, h, {0, 3, -1, 4}, 1, nullptr);
    for (std::size_t r : {0u, 1u, 3u}) CHECK(d.row_loss[r] == doctest::Approx(std::log(5.0)).epsilon(1e-15));
    CHECK(d.row_loss[2] == 0);
  }
  SUBCASE("unlabeled rows get no upstream gradient") {
    auto p = params;
    for (auto& v : p.tensors[static_cast<std::size_t>(model.decoder_weight())].values())
      v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const auto d = decode_and_loss(model, p, h, {1, -1, 2, -1}, 0.5, nullptr);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(d.grad_h(1, c) == 0);
      CHECK(d.grad_h(3, c) == 0);
    }
    CHECK(frobenius_norm(d.grad_h) > 0);
  }
}

TEST_CASE("dropout is reproducible and only active while training") {
  const auto g = random_graph({20, 60, 6, 0, false, 3});
  ModelSpec spec;
  spec.input_dim = 6;
  spec.class_count = 3;
  spec.decoder = DecoderKind::identity;
  spec.keep_prob = 0.5;
  spec.layers = {{LayerKind::gcn, 3, Activation::identity, false}};
  const Model model(spec, g);
  const auto params = model.init_params(0);
  CHECK(forward(g, model, params).out == forward(g, model, params).out);
  const auto a = forward(g, model, params, 1, true, 7).out;
  CHECK(a == forward(g, model, params, 2, true, 7).out);
  CHECK(a != forward(g, model, params, 1, true, 8).out);
  CHECK(a != forward(g, model, params).out);
  std::size_t kept = 0, total = 0;
  for (node_id v = 0; v < 200; ++v)
    for (std::size_t c = 0; c < 10; ++c) {
      const auto s = dropout_scale(1, 0, 1, v, c, 0.5);
      CHECK((s == 0 || s == 2));
      kept += s != 0;
      ++total;
    }
  CHECK(std::abs(static_cast<double>(kept) / static_cast<double>(total) - 0.5) < 0.05);
}

TEST_CASE("spec validation") {
  ModelSpec spec;
  spec.input_dim = 3;
  spec.class_count = 2;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.layers = {{LayerKind::gcn, 4, Activation::relu, false}};
  CHECK_NOTHROW(spec.validate());
  spec.keep_prob = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.keep_prob = 1;
  spec.decoder = DecoderKind::identity;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.layers.back().out_dim = 2;
  CHECK_NOTHROW(spec.validate());
  auto other = spec;
  other.l2 = 1e-4;
  CHECK(other.hash() != spec.hash());
  CHECK(ModelSpec(spec).hash() == spec.hash());
}

TEST_CASE("l2 penalty and its gradient") {
  ModelSpec spec;
  spec.input_dim = 2;
  spec.class_count = 2;
  spec.l2 = 0.1;
  spec.reg_scope = RegScope::first;
  spec.layers = {{LayerKind::gcn, 3, Activation::relu, true}, {LayerKind::gcn, 2, Activation::relu, false}};
  const Graph g(2, {}, Tensor(2, 2, 1));
  const Model model(spec, g);
  const auto params = model.init_params(5);
  double expected = 0;
  for (auto v : params.tensors[params.index_of("layer1.W")].values()) expected += v * v;
  CHECK(model.penalty(params) == doctest::Approx(0.05 * expected).epsilon(1e-14));
  auto grads = params.zeros_like();
  model.add_penalty_grad(params, grads);
  const auto& W1 = params.tensors[params.index_of("layer1.W")];
  CHECK(max_abs_diff(grads.tensors[params.index_of("layer1.W")], scaled(W1, 0.1)) < 1e-16);
  CHECK(frobenius_norm(grads.tensors[params.index_of("layer2.W")]) == 0);
  CHECK(frobenius_norm(grads.tensors[params.index_of("layer1.b")]) == 0);
}
