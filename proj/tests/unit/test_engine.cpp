#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "tgar/engine.hpp"
#include "tgar/models.hpp"
#include "tgar/synthetic.hpp"
#include "tgar/verify.hpp"

using namespace tgar;

namespace {

std::vector<node_id> all_nodes(const Graph& g) {
  std::vector<node_id> v(g.num_nodes());
  for (node_id i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

// Transform = identity, gather = copy the source row, apply = the aggregate.
LayerProgram copy_program(std::size_t dim, AccKind acc, MeanMode mode = MeanMode::active) {
  LayerProgram p;
  p.layer = 1;
  p.in_dim = dim;
  p.out_dim = dim;
  p.acc = acc;
  p.mean_mode = mode;
  p.transform = [](Tape&, const ParamBinder&, Tape::Var h, const StageContext&) { return h; };
  p.gather = [](Tape&, const ParamBinder&, const GatherInputs& in, const StageContext&) {
    return GatherOutputs{in.src, kNoVar};
  };
  p.apply = [](Tape&, const ParamBinder&, Tape::Var m, Tape::Var, Tape::Var, const StageContext&) { return m; };
  return p;
}

struct Run {
  Tensor out;
  ParameterSet grads;
  EngineCounters counters;
  std::uint64_t messages = 0;
  std::uint64_t value_messages = 0;
};

// Forward over every layer on the full graph, optional backward from `upstream`.
Run run_model(const Graph& g, const Model& model, const ParameterSet& params, std::size_t P, const Tensor* upstream,
              bool contiguous = false, std::uint64_t pseed = 0) {
  const auto plan = partition_even(g, P, {pseed, contiguous});
  ViewOptions vo;
  vo.layers = model.layers();
  const auto view = build_view(g, all_nodes(g), vo);
  InMemoryTransport transport(P);
  Execution exec(g, plan, view, transport);
  StageContext ctx;
  for (int k = 1; k <= model.layers(); ++k) {
    ctx.layer = k;
    exec.forward_layer(model.program(k), params, ctx);
  }
  Run r;
  r.out = Tensor(g.num_nodes(), model.program(model.layers()).out_dim);
  for (part_id p = 0; p < P; ++p) {
    const auto& nodes = exec.output_nodes(p);
    for (std::size_t i = 0; i < nodes.size(); ++i)
      std::copy(exec.output(p).row(i).begin(), exec.output(p).row(i).end(), r.out.row(nodes[i]).begin());
  }
  if (upstream) {
    for (part_id p = 0; p < P; ++p) {
      const auto& nodes = exec.output_nodes(p);
      Tensor gp(nodes.size(), upstream->cols());
      for (std::size_t i = 0; i < nodes.size(); ++i)
        std::copy(upstream->row(nodes[i]).begin(), upstream->row(nodes[i]).end(), gp.row(i).begin());
      exec.set_output_grad(p, std::move(gp));
    }
    for (int k = model.layers(); k >= 1; --k) {
      ctx.layer = k;
      exec.backward_layer(model.program(k), params, ctx);
    }
    r.grads = reduce_params(params, exec.contributions(model.layer_of_param()));
  }
  r.counters = exec.counters();
  r.messages = transport.messages();
  r.value_messages = transport.messages_of(MessageKind::master_to_mirror_value);
  return r;
}

ModelSpec gcn(std::size_t in, std::vector<std::size_t> widths, GcnNorm norm = GcnNorm::renormalized) {
  ModelSpec s;
  s.input_dim = in;
  s.class_count = widths.back();
  s.decoder = DecoderKind::identity;
  s.keep_prob = 1;
  s.norm = norm;
  for (std::size_t i = 0; i < widths.size(); ++i)
    s.layers.push_back(
        {LayerKind::gcn, widths[i], i + 1 == widths.size() ? Activation::identity : Activation::tanh, false});
  return s;
}

Graph path4(std::size_t dim = 2) {
  Tensor x(4, dim);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * static_cast<double>(i + 1);
  return Graph(4, {{0, 1, 1}, {1, 0, 1}, {1, 2, 1}, {2, 1, 1}, {2, 3, 1}, {3, 2, 1}}, x);
}

}  // namespace

TEST_CASE("two-node graph equals L h W by hand") {
  const Graph g(2, {{0, 1, 1}, {1, 0, 1}}, Tensor::from_rows({{1, 2}, {3, 5}}));
  const auto spec = gcn(2, {2}, GcnNorm::laplacian);
  const Model model(spec, g);
  ParameterSet params;
  params.add("layer1.W", Tensor::from_rows({{1, -1}, {0.5, 2}}));
  const auto r = run_model(g, model, params, 1, nullptr);
  // L = [[1, -1], [-1, 1]] for one unit edge without self-loops.
  const Tensor n = Tensor::from_rows({{1 * 1 + 2 * 0.5, 1 * -1 + 2 * 2.0}, {3 * 1 + 5 * 0.5, 3 * -1 + 5 * 2.0}});
  const Tensor expected = Tensor::from_rows({{n(0, 0) - n(1, 0), n(0, 1) - n(1, 1)},
                                            {n(1, 0) - n(0, 0), n(1, 1) - n(0, 1)}});
  CHECK(max_abs_diff(r.out, expected) < 1e-15);
}

TEST_CASE("copy program sums leaf features into the star center") {
  const Graph g(4, {{1, 0, 1}, {2, 0, 1}, {3, 0, 1}}, Tensor::from_rows({{0, 0}, {1, 10}, {2, 20}, {4, 40}}));
  for (std::size_t P : {1, 2, 4}) {
    const auto plan = partition_even(g, P, {1, false});
    ViewOptions vo;
    const auto view = build_view(g, {0}, vo);
    InMemoryTransport transport(P);
    Execution exec(g, plan, view, transport);
    exec.forward_layer(copy_program(2, AccKind::sum), ParameterSet{}, StageContext{});
    const auto owner = plan.master_of(0);
    const auto& nodes = exec.output_nodes(owner);
    REQUIRE(std::find(nodes.begin(), nodes.end(), 0) != nodes.end());
    const auto row = exec.output(owner).row(static_cast<std::size_t>(std::find(nodes.begin(), nodes.end(), 0) - nodes.begin()));
    CHECK(row[0] == 7);
    CHECK(row[1] == 70);
  }
}

TEST_CASE("mean aggregation over active or global in-degree") {
  // Node 0 receives from 1 and 2; node 2's own in-edge from 3 is only in the
  // graph, so a K=1 view on target 0 uses both of 0's in-edges either way.
  const Graph g(4, {{1, 0, 1}, {2, 0, 1}, {3, 2, 1}}, Tensor::from_rows({{0}, {2}, {4}, {8}}));
  const auto plan = partition_even(g, 1);
  ViewOptions vo;
  vo.fanout = {1};
  vo.seed = 3;
  const auto view = build_view(g, {0}, vo);
  REQUIRE(view.touched() == 2);
  const node_id kept = view.nodes()[0] == 0 ? view.nodes()[1] : view.nodes()[0];
  for (auto mode : {MeanMode::active, MeanMode::global}) {
    InMemoryTransport transport(1);
    Execution exec(g, plan, view, transport);
    exec.forward_layer(copy_program(1, AccKind::mean, mode), ParameterSet{}, StageContext{});
    const double value = g.node_features()(kept, 0);
    CHECK(exec.output(0)(0, 0) == (mode == MeanMode::active ? value : value / 2));
  }
}

TEST_CASE("path split in two matches one partition bitwise") {
  const auto g = path4(3);
  const auto spec = gcn(3, {4, 2});
  const Model model(spec, g);
  const auto params = model.init_params(7);
  const auto one = run_model(g, model, params, 1, nullptr);
  const auto two = run_model(g, model, params, 2, nullptr, true);
  CHECK(one.out == two.out);
}

TEST_CASE("master to mirror messages on the path") {
  const auto g = path4();
  const auto spec = gcn(2, {2});
  const Model model(spec, g);
  const auto params = model.init_params(1);
  CHECK(run_model(g, model, params, 1, nullptr).value_messages == 0);
  const auto r = run_model(g, model, params, 2, nullptr, true);
  CHECK(r.value_messages == 2);
  REQUIRE(r.counters.forward_value_syncs.size() >= 2);
  CHECK(r.counters.forward_value_syncs[1] == 2);
}

TEST_CASE("value syncs equal the mirror count and never see a mirror in the csr pass") {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    const auto g = random_graph({20 + seed, 60 + 8 * seed, 3, 0, true, seed});
    const std::size_t P = 2 + seed % 4;
    const auto spec = gcn(3, {3, 2});
    const Model model(spec, g);
    const auto params = model.init_params(seed);
    const auto r = run_model(g, model, params, P, nullptr, false, seed);
    const auto plan = partition_even(g, P, {seed, false});
    std::size_t mirrors = 0;
    for (part_id p = 0; p < P; ++p) mirrors += plan.mirror_count(p);
    for (int k = 1; k <= 2; ++k) CHECK(r.counters.forward_value_syncs[static_cast<std::size_t>(k)] == mirrors);
    CHECK(r.counters.csr_mirror_gathers == 0);
    CHECK(r.counters.frames_allocated >= 1);
  }
}

TEST_CASE("zero upstream gradient gives exactly zero parameter gradients") {
  const auto g = random_graph({12, 40, 3, 0, true, 5});
  const auto spec = gcn(3, {4, 2});
  const Model model(spec, g);
  const auto params = model.init_params(2);
  const Tensor zero(g.num_nodes(), 2);
  const auto r = run_model(g, model, params, 3, &zero);
  for (const auto& t : r.grads.tensors)
    for (auto v : t.values()) CHECK(v == 0);
}

TEST_CASE("parameter gradients are identical across partition counts") {
  std::mt19937_64 rng(8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = random_graph({30, 110, 4, 0, true, seed});
    const auto spec = gcn(4, {5, 3});
    const Model model(spec, g);
    const auto params = model.init_params(seed + 100);
    Tensor up(g.num_nodes(), 3);
    for (auto& v : up.values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const auto base = run_model(g, model, params, 1, &up);
    for (std::size_t P : {2, 3, 5}) {
      const auto r = run_model(g, model, params, P, &up, false, seed);
      CHECK(r.out == base.out);
      CHECK(r.grads == base.grads);
      CHECK(r.counters.frames_allocated == r.counters.frames_released);
    }
  }
}

TEST_CASE("reduce_params is order independent and additive") {
  ParameterSet layout;
  layout.add("w", Tensor(2, 2));
  std::mt19937_64 rng(1);
  std::vector<GradContribution> cs;
  for (part_id p = 0; p < 4; ++p) {
    GradContribution c{p, 1, 0, ExactTensor(2, 2)};
    for (std::size_t i = 0; i < 4; ++i) c.grad.add(i, std::uniform_real_distribution<double>(-1, 1)(rng));
    cs.push_back(c);
  }
  SUBCASE("single contribution") {
    const auto r = reduce_params(layout, {cs[0]});
    CHECK(r.tensors[0] == cs[0].grad.to_tensor());
  }
  SUBCASE("permutation") {
    auto shuffled = cs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(reduce_params(layout, cs) == reduce_params(layout, shuffled));
  }
  SUBCASE("two halves") {
    const Tensor G = Tensor::from_rows({{1, -2}, {0.5, 3}});
    GradContribution a{0, 1, 0, ExactTensor(2, 2)}, b{1, 1, 0, ExactTensor(2, 2)};
    a.grad.add_tensor(scaled(G, 0.5));
    b.grad.add_tensor(scaled(G, 0.5));
    CHECK(reduce_params(layout, {a, b}).tensors[0] == G);
  }
  SUBCASE("shape mismatch") {
    GradContribution bad{0, 1, 0, ExactTensor(3, 1)};
    CHECK_THROWS_AS(reduce_params(layout, {bad}), ShapeError);
  }
}

TEST_CASE("attention weights sum to one per destination") {
  const auto g = random_graph({15, 50, 3, 2, true, 4});
  ModelSpec spec;
  spec.input_dim = 3;
  spec.class_count = 2;
  spec.decoder = DecoderKind::identity;
  spec.keep_prob = 1;
  spec.edge_proj_dim = 2;
  spec.layers = {{LayerKind::gat_edge, 2, Activation::identity, false}};
  const Model model(spec, g);
  const auto params = model.init_params(3);
  for (std::size_t P : {1, 3}) {
    const auto plan = partition_even(g, P, {2, false});
    ViewOptions vo;
    const auto view = build_view(g, all_nodes(g), vo);
    InMemoryTransport transport(P);
    Execution exec(g, plan, view, transport);
    StageContext ctx;
    exec.forward_layer(model.program(1), params, ctx);
    const auto w = exec.attention_weights(1);
    std::vector<double> sum(g.num_nodes(), 0);
    for (edge_id e = 0; e < g.num_edges(); ++e) {
      REQUIRE(!std::isnan(w[e]));
      CHECK(w[e] > 0);
      sum[g.dst(e)] += w[e];
    }
    for (node_id v = 0; v < g.num_nodes(); ++v)
      if (g.in_degree(v) > 0) CHECK(std::abs(sum[v] - 1) < 1e-12);
  }
}

TEST_CASE("forward layers must run in order") {
  const auto g = path4();
  const auto spec = gcn(2, {2, 2});
  const Model model(spec, g);
  const auto params = model.init_params(0);
  const auto plan = partition_even(g, 1);
  ViewOptions vo;
  vo.layers = 2;
  const auto view = build_view(g, all_nodes(g), vo);
  InMemoryTransport transport(1);
  Execution exec(g, plan, view, transport);
  StageContext ctx;
  ctx.layer = 2;
  CHECK_THROWS_AS(exec.forward_layer(model.program(2), params, ctx), Error);
}
