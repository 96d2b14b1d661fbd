#include "tgar/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace tgar {

namespace {

constexpr real kLeakySlope = real{0.2};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::leaky_relu: return "leaky_relu";
  }
  return "?";
}
std::string to_string(LayerKind k) { return k == LayerKind::gcn ? "gcn" : "gat_edge"; }
std::string to_string(DecoderKind k) { return k == DecoderKind::identity ? "identity" : "linear"; }
std::string to_string(RegScope s) { return s == RegScope::first ? "first" : "all"; }
std::string to_string(GcnNorm n) { return n == GcnNorm::laplacian ? "laplacian" : "renormalized"; }

Activation parse_activation(const std::string& s) {
  return parse_enum<Activation>(s,
                                {{"identity", Activation::identity},
                                 {"relu", Activation::relu},
                                 {"tanh", Activation::tanh},
                                 {"leaky_relu", Activation::leaky_relu}},
                                "activation");
}
LayerKind parse_layer_kind(const std::string& s) {
  return parse_enum<LayerKind>(s, {{"gcn", LayerKind::gcn}, {"gat_edge", LayerKind::gat_edge}}, "layer kind");
}
DecoderKind parse_decoder(const std::string& s) {
  return parse_enum<DecoderKind>(s, {{"identity", DecoderKind::identity}, {"linear", DecoderKind::linear}},
                                 "decoder");
}
RegScope parse_reg_scope(const std::string& s) {
  return parse_enum<RegScope>(s, {{"first", RegScope::first}, {"all", RegScope::all}}, "regularization scope");
}
GcnNorm parse_norm(const std::string& s) {
  return parse_enum<GcnNorm>(s, {{"laplacian", GcnNorm::laplacian}, {"renormalized", GcnNorm::renormalized}},
                             "normalization");
}

Tape::Var activate(Tape& t, Tape::Var x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return t.relu(x);
    case Activation::tanh: return t.tanh(x);
    case Activation::leaky_relu: return t.leaky_relu(x, kLeakySlope);
  }
  return x;
}

real activate(real x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0 ? x : real{0};
    case Activation::tanh: return std::tanh(x);
    case Activation::leaky_relu: return x > 0 ? x : kLeakySlope * x;
  }
  return x;
}

real activate_derivative(real x, Activation a) {
  switch (a) {
    case Activation::identity: return 1;
    case Activation::relu: return x > 0 ? real{1} : real{0};
    case Activation::tanh: {
      const real y = std::tanh(x);
      return 1 - y * y;
    }
    case Activation::leaky_relu: return x > 0 ? real{1} : kLeakySlope;
  }
  return 1;
}

void ModelSpec::validate() const {
  if (layers.empty()) throw ConfigError("model needs at least one layer");
  if (input_dim == 0) throw ConfigError("model input width is 0");
  if (class_count < 2) throw ConfigError("model needs at least two classes");
  if (!(keep_prob > 0 && keep_prob <= 1)) throw ConfigError("dropout keep probability must be in (0, 1]");
  if (!(l2 >= 0) || !std::isfinite(l2)) throw ConfigError("l2 coefficient must be finite and >= 0");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].out_dim == 0) throw ConfigError("layer " + std::to_string(i + 1) + " has width 0");
  }
  if (decoder == DecoderKind::identity && layers.back().out_dim != class_count) {
    throw ConfigError("identity decoder needs the last layer width (" + std::to_string(layers.back().out_dim) +
                      ") to equal the class count (" + std::to_string(class_count) + ")");
  }
}

std::string ModelSpec::canonical() const {
  std::ostringstream s;
  s.precision(17);
  s << "input=" << input_dim << ";classes=" << class_count << ";keep=" << keep_prob
    << ";decoder=" << to_string(decoder) << ";decoder_zero=" << decoder_zero_init << ";l2=" << l2
    << ";reg=" << to_string(reg_scope) << ";norm=" << to_string(norm) << ";loops=" << add_self_loops
    << ";edge_proj=" << edge_proj_dim;
  for (const auto& l : layers) {
    s << ";layer=" << to_string(l.kind) << ',' << l.out_dim << ',' << to_string(l.activation) << ',' << l.bias;
  }
  return s.str();
}

std::uint64_t ModelSpec::hash() const { return fnv1a64(canonical()); }

real dropout_scale(std::uint64_t seed, std::uint64_t step, int layer, node_id node, std::size_t col, double keep) {
  if (keep >= 1) return 1;
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ step);
  h = splitmix(h ^ static_cast<std::uint64_t>(layer));
  h = splitmix(h ^ node);
  h = splitmix(h ^ col);
  return unit(h) < keep ? static_cast<real>(1 / keep) : real{0};
}

Model::Model(ModelSpec spec, const Graph& g) : spec_(std::move(spec)), edge_dim_(g.edge_feature_dim()) {
  spec_.validate();
  if (g.feature_dim() != spec_.input_dim) {
    throw ConfigError("graph features have width " + std::to_string(g.feature_dim()) + ", model expects " +
                      std::to_string(spec_.input_dim));
  }
  bool any_gcn = false;
  for (const auto& l : spec_.layers) any_gcn = any_gcn || l.kind == LayerKind::gcn;
  GcnWeights w;
  if (any_gcn) w = gcn_weights(g, spec_.norm, spec_.add_self_loops);
  std::size_t in = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& ls = spec_.layers[i];
    const int k = static_cast<int>(i) + 1;
    programs_.push_back(ls.kind == LayerKind::gcn ? make_gcn(k, in, ls, w) : make_gat(k, in, ls));
    in = ls.out_dim;
  }
  if (spec_.decoder == DecoderKind::linear) {
    const int k = static_cast<int>(spec_.layers.size()) + 1;
    decoder_weight_ = static_cast<int>(names_.size());
    names_.push_back("decoder.W");
    shapes_.emplace_back(in, spec_.class_count);
    glorot_.push_back(!spec_.decoder_zero_init);
    layer_of_param_.push_back(k);
    regularized_.push_back(spec_.reg_scope == RegScope::all);
    decoder_bias_ = static_cast<int>(names_.size());
    names_.push_back("decoder.b");
    shapes_.emplace_back(1, spec_.class_count);
    glorot_.push_back(false);
    layer_of_param_.push_back(k);
    regularized_.push_back(false);
  }
}

LayerProgram Model::make_gcn(int layer, std::size_t in, const LayerSpec& ls, const GcnWeights& w) {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  const std::size_t wi = names_.size();
  names_.push_back(prefix + "W");
  shapes_.emplace_back(in, ls.out_dim);
  glorot_.push_back(true);
  layer_of_param_.push_back(layer);
  regularized_.push_back(layer == 1 || spec_.reg_scope == RegScope::all);
  std::size_t bi = 0;
  if (ls.bias) {
    bi = names_.size();
    names_.push_back(prefix + "b");
    shapes_.emplace_back(1, ls.out_dim);
    glorot_.push_back(false);
    layer_of_param_.push_back(layer);
    regularized_.push_back(false);
  }

  LayerProgram p;
  p.layer = layer;
  p.in_dim = in;
  p.out_dim = ls.out_dim;
  p.acc = AccKind::sum;
  p.edge_coefficient = w.edge;
  p.node_coefficient = w.diag;
  const double keep = spec_.keep_prob;
  p.transform = [wi, keep, layer](Tape& t, const ParamBinder& bind, Tape::Var h, const StageContext& ctx) {
    Tape::Var x = h;
    if (ctx.training && keep < 1) {
      const Tensor& xv = t.value(h);
      Tensor m(xv.rows(), xv.cols());
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < xv.cols(); ++c)
          if (xv(r, c) != 0) m(r, c) = dropout_scale(ctx.seed, ctx.step, layer, ctx.nodes[r], c, keep);
      x = t.mask(h, std::move(m));
    }
    return t.linear(x, bind(t, wi));
  };
  p.gather = [](Tape& t, const ParamBinder&, const GatherInputs& in, const StageContext&) {
    return GatherOutputs{t.scale_rows(in.src, in.coefficient), kNoVar};
  };
  const Activation act = ls.activation;
  const bool bias = ls.bias;
  p.apply = [act, bias, bi](Tape& t, const ParamBinder& bind, Tape::Var m, Tape::Var n, Tape::Var diag,
                            const StageContext&) {
    Tape::Var z = t.add(m, t.scale_rows(n, diag));
    if (bias) z = t.add_bias(z, bind(t, bi));
    return activate(t, z, act);
  };
  return p;
}

LayerProgram Model::make_gat(int layer, std::size_t in, const LayerSpec& ls) {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  auto add = [&](const std::string& name, std::size_t r, std::size_t c, bool glorot, bool reg) {
    names_.push_back(prefix + name);
    shapes_.emplace_back(r, c);
    glorot_.push_back(glorot);
    layer_of_param_.push_back(layer);
    regularized_.push_back(reg);
    return names_.size() - 1;
  };
  const bool reg = layer == 1 || spec_.reg_scope == RegScope::all;
  const std::size_t wi = add("W", in, ls.out_dim, true, reg);
  const std::size_t adst = add("a_dst", ls.out_dim, 1, true, false);
  const std::size_t asrc = add("a_src", ls.out_dim, 1, true, false);
  const bool edges = edge_dim_ > 0;
  if (!edges && spec_.edge_proj_dim > 0)
    throw ConfigError("layer " + std::to_string(layer) + " projects edge features but the graph has none");
  const std::size_t proj = spec_.edge_proj_dim ? spec_.edge_proj_dim : ls.out_dim;
  std::size_t we = 0, ae = 0;
  if (edges) {
    we = add("W_e", edge_dim_, proj, true, reg);
    ae = add("a_e", proj, 1, true, false);
  }
  std::size_t bi = 0;
  if (ls.bias) bi = add("b", 1, ls.out_dim, false, false);

  LayerProgram p;
  p.layer = layer;
  p.in_dim = in;
  p.out_dim = ls.out_dim;
  p.acc = AccKind::attention;
  p.uses_edge_features = edges;
  const double keep = spec_.keep_prob;
  p.transform = [wi, keep, layer](Tape& t, const ParamBinder& bind, Tape::Var h, const StageContext& ctx) {
    Tape::Var x = h;
    if (ctx.training && keep < 1) {
      const Tensor& xv = t.value(h);
      Tensor m(xv.rows(), xv.cols());
      for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < xv.cols(); ++c)
          if (xv(r, c) != 0) m(r, c) = dropout_scale(ctx.seed, ctx.step, layer, ctx.nodes[r], c, keep);
      x = t.mask(h, std::move(m));
    }
    return t.linear(x, bind(t, wi));
  };
  p.gather = [=](Tape& t, const ParamBinder& bind, const GatherInputs& in, const StageContext&) {
    Tape::Var s = t.add(t.linear(in.dst, bind(t, adst)), t.linear(in.src, bind(t, asrc)));
    if (edges) s = t.add(s, t.linear(t.linear(in.edge_features, bind(t, we)), bind(t, ae)));
    return GatherOutputs{in.src, t.leaky_relu(s, kLeakySlope)};
  };
  const Activation act = ls.activation;
  const bool bias = ls.bias;
  p.apply = [act, bias, bi](Tape& t, const ParamBinder& bind, Tape::Var m, Tape::Var, Tape::Var,
                            const StageContext&) {
    Tape::Var z = m;
    if (bias) z = t.add_bias(z, bind(t, bi));
    return activate(t, z, act);
  };
  return p;
}

ParameterSet Model::init_params(std::uint64_t seed) const {
  ParameterSet out;
  std::mt19937_64 rng(splitmix(seed ^ 0x5eedULL));
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto [r, c] = shapes_[i];
    Tensor t(r, c);
    if (glorot_[i]) {
      const double a = std::sqrt(6.0 / static_cast<double>(r + c));
      for (auto& v : t.values()) v = static_cast<real>((2 * unit(rng()) - 1) * a);
    }
    out.add(names_[i], std::move(t));
  }
  return out;
}

double Model::penalty(const ParameterSet& params) const {
  if (spec_.l2 == 0) return 0;
  double sum = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!regularized_[i]) continue;
    for (real v : params.tensors[i].values()) sum += static_cast<double>(v) * v;
  }
  return 0.5 * spec_.l2 * sum;
}

void Model::add_penalty_grad(const ParameterSet& params, ParameterSet& grads) const {
  if (spec_.l2 == 0) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!regularized_[i]) continue;
    auto& g = grads.tensors[i];
    const auto& w = params.tensors[i];
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += static_cast<real>(spec_.l2) * w[k];
  }
}

DecodeResult decode_and_loss(const Model& model, const ParameterSet& params, const Tensor& h,
                             const std::vector<int>& labels, real row_weight, std::vector<ExactTensor>* sinks) {
  if (labels.size() != h.rows()) throw ShapeError("decode_and_loss: one label per row required");
  Tape t;
  ParamBinder bind(params, sinks);
  const auto hv = t.leaf(h, true);
  Tape::Var z = hv;
  if (model.decoder_weight() >= 0) {
    z = t.linear(hv, bind(t, static_cast<std::size_t>(model.decoder_weight())));
    z = t.add_bias(z, bind(t, static_cast<std::size_t>(model.decoder_bias())));
  }
  DecodeResult out;
  out.logits = t.value(z);
  if (out.logits.cols() != model.spec().class_count) throw ShapeError("decoder output width != class count");
  std::vector<int> safe(labels.size());
  Tensor seed(h.rows(), 1);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= 0) {
      safe[r] = labels[r];
      seed[r] = row_weight;
    }
  }
  const auto loss = t.cross_entropy_rows(z, safe);
  out.row_loss = t.value(loss);
  for (std::size_t r = 0; r < labels.size(); ++r)
    if (labels[r] < 0) out.row_loss[r] = 0;
  out.predicted.resize(h.rows());
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto row = out.logits.row(r);
    out.predicted[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  t.seed(loss, seed);
  t.backward();
  out.grad_h = t.grad(hv).empty() ? Tensor(h.rows(), h.cols()) : t.grad(hv);
  return out;
}

}  // namespace tgar
