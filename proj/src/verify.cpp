#include "tgar/verify.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace tgar {

namespace {

constexpr double kFdEps = 1e-6;

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  Tensor t(r, c);
  for (auto& v : t.values()) v = static_cast<real>(lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53));
  return t;
}

DatasetBundle with_features(const DatasetBundle& d, Tensor features) {
  return make_dataset(d.graph.num_nodes(), d.graph.edge_list(), std::move(features), d.graph.edge_features(),
                      d.labels, d.train, d.validation, d.test);
}

ParameterSet random_params(const Model& model, std::uint64_t seed) {
  auto params = model.init_params(seed);
  std::mt19937_64 rng(seed + 991);
  // Biases and offsets start at zero; give them values so their gradients matter.
  for (auto& t : params.tensors)
    for (auto& v : t.values())
      if (v == 0) v = static_cast<real>(0.3 * (static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5));
  return params;
}

// Scalar sum of `y` weighted elementwise by a fixed random tensor.
Tape::Var weighted_sum(Tape& t, Tape::Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& v = t.value(y);
  const auto w = t.leaf(random_tensor(rng, v.rows(), v.cols()), false);
  const auto prod = t.mul(y, w);
  const auto ones_row = t.leaf(Tensor(1, v.rows(), real{1}), false);
  const auto ones_col = t.leaf(Tensor(v.cols(), 1, real{1}), false);
  return t.linear(t.linear(ones_row, prod), ones_col);
}

CheckResult from_report(const std::string& name, const GradCheckReport& r, double tol) {
  CheckResult c;
  c.name = name;
  c.value = r.max_rel_error;
  c.tolerance = tol;
  c.pass = r.pass && r.max_rel_error < tol;
  return c;
}

CheckResult tape_check(const std::string& name, const std::string& corrupt, bool fault, std::uint64_t seed,
                       const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& build,
                       std::vector<Tensor> inputs) {
  const double tol = 1e-6;
  const auto r = grad_check(build, inputs, kFdEps, tol, fault ? corrupt : std::string{});
  (void)seed;
  return from_report(name, r, tol);
}

ModelSpec gcn_spec(std::size_t in, std::size_t classes, bool bias, double l2) {
  ModelSpec s;
  s.input_dim = in;
  s.class_count = classes;
  s.layers = {{LayerKind::gcn, 4, Activation::tanh, bias}, {LayerKind::gcn, 3, Activation::identity, bias}};
  s.decoder = DecoderKind::linear;
  s.l2 = l2;
  s.reg_scope = RegScope::all;
  s.norm = GcnNorm::renormalized;
  return s;
}

ModelSpec gat_spec(std::size_t in, std::size_t classes) {
  ModelSpec s;
  s.input_dim = in;
  s.class_count = classes;
  s.layers = {{LayerKind::gat_edge, 4, Activation::tanh, true}};
  s.decoder = DecoderKind::linear;
  return s;
}

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  if (!a.compatible(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.tensors[i].values();
    const auto y = b.tensors[i].values();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(real)) != 0) return false;
  }
  return true;
}

}  // namespace

DatasetBundle random_dataset(const RandomGraphOptions& o, std::size_t classes) {
  const Graph g = random_graph(o);
  std::mt19937_64 rng(o.seed + 5);
  std::vector<int> labels(o.nodes);
  for (std::size_t v = 0; v < o.nodes; ++v) labels[v] = static_cast<int>(v % classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<node_id> train(o.nodes);
  for (node_id v = 0; v < o.nodes; ++v) train[v] = v;
  return make_dataset(o.nodes, g.edge_list(), g.node_features(), g.edge_features(), std::move(labels),
                      std::move(train), {}, {});
}

EngineProbe probe_engine(const DatasetBundle& d, const ModelSpec& spec, const ParameterSet& params,
                         std::size_t partitions, std::uint64_t partition_seed) {
  const Model model(spec, d.graph);
  const auto plan = partition_even(d.graph, partitions, {partition_seed, false});
  TrainingConfig cfg;
  cfg.partitions = partitions;
  cfg.steps = 1;
  Trainer trainer(d, model, plan, cfg);
  trainer.set_input_grad(true);
  const auto view = trainer.view_for(trainer.batch(0), 0);
  auto res = trainer.train_step(view, params, 0);
  return {res.loss, std::move(res.grads), std::move(res.input_grad)};
}

double engine_loss(const DatasetBundle& d, const ModelSpec& spec, const ParameterSet& params, const Tensor& features,
                   std::size_t partitions) {
  const auto data = with_features(d, features);
  const Model model(spec, data.graph);
  const auto plan = partition_even(data.graph, partitions, {0, false});
  TrainingConfig cfg;
  cfg.partitions = partitions;
  cfg.steps = 1;
  Trainer trainer(data, model, plan, cfg);
  const auto view = trainer.view_for(trainer.batch(0), 0);
  return trainer.train_step(view, params, 0).loss;
}

double engine_vs_dense(const Graph& g, const ModelSpec& spec, const ParameterSet& params, std::size_t partitions) {
  const Model model(spec, g);
  const auto plan = partition_even(g, partitions, {3, false});
  std::vector<node_id> all(g.num_nodes());
  for (node_id v = 0; v < all.size(); ++v) all[v] = v;
  ViewOptions vo;
  vo.layers = model.layers();
  const auto view = build_view(g, all, vo);
  InMemoryTransport transport(partitions);
  Execution exec(g, plan, view, transport);
  StageContext ctx;
  for (int k = 1; k <= model.layers(); ++k) {
    ctx.layer = k;
    exec.forward_layer(model.program(k), params, ctx);
  }
  Tensor engine(g.num_nodes(), spec.layers.back().out_dim);
  for (part_id p = 0; p < partitions; ++p) {
    const auto& nodes = exec.output_nodes(p);
    for (std::size_t r = 0; r < nodes.size(); ++r)
      std::copy(exec.output(p).row(r).begin(), exec.output(p).row(r).end(), engine.row(nodes[r]).begin());
  }
  const auto dg = dense_graph(g, spec.norm, spec.add_self_loops);
  std::vector<Tensor> weights, biases;
  std::vector<Activation> acts;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const std::string prefix = "layer" + std::to_string(k + 1) + ".";
    weights.push_back(params.tensors[params.index_of(prefix + "W")]);
    biases.push_back(spec.layers[k].bias ? params.tensors[params.index_of(prefix + "b")] : Tensor{});
    acts.push_back(spec.layers[k].activation);
  }
  return max_abs_diff(engine, dense_gcn_forward(dg, weights, acts, biases));
}

CheckResult engine_gradcheck(const std::string& name, const DatasetBundle& d, const ModelSpec& spec,
                             std::uint64_t seed, double tol, bool flip_analytic) {
  const Model model(spec, d.graph);
  const auto params = random_params(model, seed);
  const std::size_t parts = std::min<std::size_t>(2, d.graph.num_nodes());
  const auto probe = probe_engine(d, spec, params, parts);
  std::vector<Tensor> inputs = params.tensors;
  inputs.push_back(d.graph.node_features());
  std::vector<Tensor> analytic = probe.grads.tensors;
  analytic.push_back(probe.input_grad);
  if (flip_analytic)
    for (auto& a : analytic) a = scaled(a, -1);
  auto loss = [&](const std::vector<Tensor>& xs) {
    ParameterSet p = params;
    for (std::size_t i = 0; i < p.size(); ++i) p.tensors[i] = xs[i];
    return engine_loss(d, spec, p, xs.back(), parts);
  };
  const auto report = grad_check(loss, inputs, analytic, kFdEps, tol);
  auto c = from_report(name, report, tol);
  c.detail = std::to_string(inputs.size() - 1) + " parameter tensors + features";
  return c;
}

std::vector<std::string> gradcheck_names() {
  return {"tape.linear",           "tape.activations",      "tape.bias_scale_rows", "tape.cross_entropy",
          "tape.mul_mask",         "engine.gcn",            "engine.gcn_bias_l2",   "engine.gat_edge",
          "decoder.grad",          "oracle.forward",        "oracle.backward",      "oracle.chebyshev",
          "oracle.nested",         "oracle.dense_backward", "engine.partition_sweep", "engine.attention_sum"};
}

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed, const std::string& inject_fault) {
  if (!inject_fault.empty()) {
    const auto names = gradcheck_names();
    if (std::find(names.begin(), names.end(), inject_fault) == names.end()) {
      throw ConfigError("unknown check '" + inject_fault + "'");
    }
  }
  auto fault = [&](const char* n) { return inject_fault == n; };
  std::mt19937_64 rng(seed * 7919 + 1);
  std::vector<CheckResult> out;

  out.push_back(tape_check(
      "tape.linear", "linear", fault("tape.linear"), seed,
      [s = seed](Tape& t, const std::vector<Tape::Var>& in) { return weighted_sum(t, t.linear(in[0], in[1]), s); },
      {random_tensor(rng, 5, 3), random_tensor(rng, 3, 4)}));
  out.push_back(tape_check(
      "tape.activations", "tanh", fault("tape.activations"), seed,
      [s = seed](Tape& t, const std::vector<Tape::Var>& in) {
        auto y = t.add(t.add(t.tanh(in[0]), t.relu(in[0])), t.add(t.leaky_relu(in[0], 0.2), t.exp(in[0])));
        return weighted_sum(t, y, s);
      },
      {random_tensor(rng, 4, 3)}));
  out.push_back(tape_check(
      "tape.bias_scale_rows", "scale_rows", fault("tape.bias_scale_rows"), seed,
      [s = seed](Tape& t, const std::vector<Tape::Var>& in) {
        return weighted_sum(t, t.scale(t.scale_rows(t.add_bias(in[0], in[1]), in[2]), 1.5), s);
      },
      {random_tensor(rng, 4, 3), random_tensor(rng, 1, 3), random_tensor(rng, 4, 1)}));
  out.push_back(tape_check(
      "tape.cross_entropy", "cross_entropy", fault("tape.cross_entropy"), seed,
      [s = seed](Tape& t, const std::vector<Tape::Var>& in) {
        return weighted_sum(t, t.cross_entropy_rows(in[0], {0, 2, 1, 2, 0}), s);
      },
      {random_tensor(rng, 5, 3, -2, 2)}));
  {
    const Tensor m = random_tensor(rng, 3, 3, 0, 2);
    out.push_back(tape_check(
        "tape.mul_mask", "mul", fault("tape.mul_mask"), seed,
        [m, s = seed](Tape& t, const std::vector<Tape::Var>& in) {
          return weighted_sum(t, t.mask(t.mul(in[0], in[1]), m), s);
        },
        {random_tensor(rng, 3, 3), random_tensor(rng, 3, 3)}));
  }

  const auto gcn_data = random_dataset({8, 20, 3, 0, true, seed + 11}, 3);
  out.push_back(engine_gradcheck("engine.gcn", gcn_data, gcn_spec(3, 3, false, 0), seed + 1, 1e-5,
                                 fault("engine.gcn")));
  out.push_back(engine_gradcheck("engine.gcn_bias_l2", gcn_data, gcn_spec(3, 3, true, 0.01), seed + 2, 1e-5,
                                 fault("engine.gcn_bias_l2")));
  const auto gat_data = random_dataset({5, 12, 3, 3, false, seed + 12}, 2);
  out.push_back(engine_gradcheck("engine.gat_edge", gat_data, gat_spec(3, 2), seed + 3, 1e-5,
                                 fault("engine.gat_edge")));

  {
    // Decoder weights alone, straight through decode_and_loss.
    auto spec = gcn_spec(3, 3, false, 0);
    const Model model(spec, gcn_data.graph);
    auto params = random_params(model, seed + 4);
    const Tensor h = random_tensor(rng, 6, 3);
    const std::vector<int> labels{0, 1, 2, -1, 1, 0};
    const auto wi = static_cast<std::size_t>(model.decoder_weight());
    const auto bi = static_cast<std::size_t>(model.decoder_bias());
    std::vector<ExactTensor> sinks;
    for (const auto& t : params.tensors) sinks.emplace_back(t.rows(), t.cols());
    decode_and_loss(model, params, h, labels, real{1} / 5, &sinks);
    std::vector<Tensor> analytic{sinks[wi].to_tensor(), sinks[bi].to_tensor()};
    if (fault("decoder.grad"))
      for (auto& a : analytic) a = scaled(a, -1);
    auto loss = [&](const std::vector<Tensor>& xs) {
      auto p = params;
      p.tensors[wi] = xs[0];
      p.tensors[bi] = xs[1];
      const auto d = decode_and_loss(model, p, h, labels, 1, nullptr);
      double s = 0;
      for (real v : d.row_loss.values()) s += v;
      return s / 5;
    };
    auto c = from_report("decoder.grad", grad_check(loss, {params.tensors[wi], params.tensors[bi]}, analytic, kFdEps,
                                                    1e-6),
                         1e-6);
    out.push_back(c);
  }

  {
    const auto g = random_graph({12, 30, 3, 0, true, seed + 13});
    ModelSpec spec = gcn_spec(3, 3, true, 0);
    spec.decoder = DecoderKind::identity;
    spec.norm = GcnNorm::laplacian;
    const Model model(spec, g);
    const auto params = random_params(model, seed + 5);
    double diff = engine_vs_dense(g, spec, params, 3);
    if (fault("oracle.forward")) diff += 1e-6;
    out.push_back({"oracle.forward", diff < 1e-10, diff, 1e-10, "P=3, laplacian"});
  }

  {
    // Engine gradients against the dense chain rule.
    const auto d = random_dataset({10, 28, 3, 0, true, seed + 14}, 3);
    ModelSpec spec = gcn_spec(3, 3, false, 0);
    spec.decoder = DecoderKind::identity;
    const Model model(spec, d.graph);
    const auto params = random_params(model, seed + 6);
    const auto probe = probe_engine(d, spec, params, 2);
    const auto dg = dense_graph(d.graph, spec.norm, spec.add_self_loops);
    const std::vector<Tensor> weights{params.tensors[0], params.tensors[1]};
    const std::vector<Activation> acts{spec.layers[0].activation, spec.layers[1].activation};
    const auto trace = dense_gcn_trace(dg, weights, acts);
    const Tensor& hk = trace.H.back();
    Tensor upstream(hk.rows(), hk.cols());
    const double n = static_cast<double>(hk.rows());
    for (std::size_t r = 0; r < hk.rows(); ++r) {
      double mx = hk(r, 0), z = 0;
      for (std::size_t c = 1; c < hk.cols(); ++c) mx = std::max<double>(mx, hk(r, c));
      for (std::size_t c = 0; c < hk.cols(); ++c) z += std::exp(hk(r, c) - mx);
      for (std::size_t c = 0; c < hk.cols(); ++c) {
        const double p = std::exp(hk(r, c) - mx) / z;
        upstream(r, c) = static_cast<real>((p - (static_cast<int>(c) == d.labels[r] ? 1 : 0)) / n);
      }
    }
    const auto dense = dense_backward(dg, trace, weights, acts, upstream);
    double err = std::max({relative_error(probe.grads.tensors[0], dense.dW[0]),
                           relative_error(probe.grads.tensors[1], dense.dW[1]),
                           relative_error(probe.input_grad, dense.dX)});
    if (fault("oracle.backward")) err += 1e-6;
    out.push_back({"oracle.backward", err < 1e-8, err, 1e-8, "dW1, dW2, dX"});
  }

  {
    const auto g = random_graph({6, 14, 1, 0, true, seed + 15});
    const auto dg = dense_graph(g, GcnNorm::laplacian, false);
    const double lmax = power_iteration(dg.L);
    std::vector<double> theta(5);
    for (auto& t : theta) t = 0.5 + static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const Tensor x = random_tensor(rng, 6, 1);
    const auto eta = chebyshev_to_monomial(theta, lmax);
    Tensor cheb = chebyshev_filter(dg, x, theta, lmax);
    if (fault("oracle.chebyshev")) cheb[0] += 1e-6;
    const double diff = max_abs_diff(cheb, explicit_polynomial(dg, x, eta));
    out.push_back({"oracle.chebyshev", diff < 1e-10, diff, 1e-10, "K=4, N=6"});
    std::vector<double> eta2(5);
    for (auto& e : eta2) e = 0.5 + static_cast<double>(rng() >> 11) * 0x1.0p-53;
    Tensor nested = nested_polynomial(dg, x, eta2);
    if (fault("oracle.nested")) nested[0] += 1e-6;
    const double diff2 = max_abs_diff(nested, explicit_polynomial(dg, x, eta2));
    out.push_back({"oracle.nested", diff2 < 1e-10, diff2, 1e-10, "K=4, N=6"});
  }

  {
    // Dense chain rule against finite differences of a weighted sum of H_K.
    const auto g = random_graph({5, 12, 3, 0, true, seed + 16});
    const auto dg = dense_graph(g, GcnNorm::renormalized, false);
    const std::vector<Activation> acts{Activation::tanh, Activation::identity};
    std::vector<Tensor> weights{random_tensor(rng, 3, 4), random_tensor(rng, 4, 2)};
    const Tensor r = random_tensor(rng, 5, 2);
    const auto trace = dense_gcn_trace(dg, weights, acts);
    auto grads = dense_backward(dg, trace, weights, acts, r);
    if (fault("oracle.dense_backward")) grads.dW[0] = scaled(grads.dW[0], -1);
    auto loss = [&](const std::vector<Tensor>& xs) {
      DenseGraph d2 = dg;
      d2.X = xs[2];
      const Tensor h = dense_gcn_forward(d2, {xs[0], xs[1]}, acts);
      double s = 0;
      for (std::size_t i = 0; i < h.size(); ++i) s += static_cast<double>(h[i]) * r[i];
      return s;
    };
    const auto rep =
        grad_check(loss, {weights[0], weights[1], dg.X}, {grads.dW[0], grads.dW[1], grads.dX}, kFdEps, 1e-6);
    out.push_back(from_report("oracle.dense_backward", rep, 1e-6));
  }

  {
    const auto d = random_dataset({64, 256, 4, 0, true, seed + 17}, 3);
    const auto spec = gcn_spec(4, 3, true, 0.001);
    const Model model(spec, d.graph);
    const auto params = random_params(model, seed + 7);
    const auto base = probe_engine(d, spec, params, 1);
    bool same = true;
    for (std::size_t p : {2, 3, 5}) {
      auto other = probe_engine(d, spec, params, p, seed);
      if (fault("engine.partition_sweep") && p == 5) other.grads.tensors[0][0] = std::nextafter(other.grads.tensors[0][0], real{1});
      same = same && other.loss == base.loss && bitwise_equal(other.grads, base.grads);
    }
    out.push_back({"engine.partition_sweep", same, same ? 0.0 : 1.0, 0.5, "P in {1,2,3,5}, bitwise"});
  }

  {
    const auto d = random_dataset({20, 70, 3, 2, false, seed + 18}, 2);
    const auto spec = gat_spec(3, 2);
    const Model model(spec, d.graph);
    const auto params = random_params(model, seed + 8);
    const auto plan = partition_even(d.graph, 3, {seed, false});
    std::vector<node_id> all(d.graph.num_nodes());
    for (node_id v = 0; v < all.size(); ++v) all[v] = v;
    ViewOptions vo;
    vo.layers = 1;
    const auto view = build_view(d.graph, all, vo);
    InMemoryTransport transport(3);
    Execution exec(d.graph, plan, view, transport);
    StageContext ctx;
    exec.forward_layer(model.program(1), params, ctx);
    auto w = exec.attention_weights(1);
    if (fault("engine.attention_sum")) w[0] += 1e-9;
    std::vector<double> sums(d.graph.num_nodes(), 0);
    for (edge_id e = 0; e < d.graph.num_edges(); ++e) sums[d.graph.dst(e)] += w[e];
    double worst = 0;
    for (node_id v = 0; v < d.graph.num_nodes(); ++v)
      if (d.graph.in_degree(v) > 0) worst = std::max(worst, std::abs(sums[v] - 1));
    out.push_back({"engine.attention_sum", worst <= 1e-12, worst, 1e-12, "P=3"});
  }
  return out;
}

}  // namespace tgar
