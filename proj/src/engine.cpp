#include "tgar/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace tgar {

namespace {

constexpr std::size_t kHeaderBytes = 16;
constexpr real kNegInf = -std::numeric_limits<real>::infinity();

std::size_t bump(std::vector<std::uint64_t>& v, std::size_t idx) {
  if (v.size() <= idx) v.resize(idx + 1, 0);
  return ++v[idx];
}

}  // namespace

std::size_t StageMessage::bytes() const {
  return kHeaderBytes + values.size() * sizeof(real) + exact.size() * sizeof(fixed_t) + (count ? 8 : 0);
}

InMemoryTransport::InMemoryTransport(std::size_t partitions) : partitions_(partitions) {
  if (partitions == 0) throw RangeError("transport needs at least one partition");
  boxes_.reserve(partitions * partitions);
  for (std::size_t i = 0; i < partitions * partitions; ++i) boxes_.push_back(std::make_unique<Mailbox>());
}

void InMemoryTransport::send(part_id from, part_id to, StageMessage msg) {
  if (from >= partitions_ || to >= partitions_) {
    throw RangeError("undeliverable message: partition " + std::to_string(to) + " of " + std::to_string(partitions_));
  }
  messages_.fetch_add(1);
  bytes_.fetch_add(msg.bytes());
  by_kind_[static_cast<std::size_t>(msg.kind)].fetch_add(1);
  auto& box = *boxes_[from * partitions_ + to];
  std::lock_guard lock(box.mu);
  box.queue.push_back(std::move(msg));
}

std::vector<std::pair<part_id, StageMessage>> InMemoryTransport::drain(part_id to) {
  std::vector<std::pair<part_id, StageMessage>> out;
  for (part_id from = 0; from < partitions_; ++from) {
    auto& box = *boxes_[from * partitions_ + to];
    std::lock_guard lock(box.mu);
    for (auto& m : box.queue) out.emplace_back(from, std::move(m));
    box.queue.clear();
  }
  return out;
}

void InMemoryTransport::reset_counters() {
  messages_ = 0;
  bytes_ = 0;
  for (auto& c : by_kind_) c = 0;
}

void EngineCounters::merge(const EngineCounters& o) {
  gather_invocations += o.gather_invocations;
  csr_mirror_gathers += o.csr_mirror_gathers;
  csr_skipped_edges += o.csr_skipped_edges;
  frames_allocated += o.frames_allocated;
  frames_released += o.frames_released;
  auto add_vec = [](std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
    if (a.size() < b.size()) a.resize(b.size(), 0);
    for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
  };
  add_vec(forward_value_syncs, o.forward_value_syncs);
  add_vec(backward_value_syncs, o.backward_value_syncs);
}

ParameterSet reduce_params(const ParameterSet& layout, std::vector<GradContribution> contributions) {
  std::sort(contributions.begin(), contributions.end(), [](const GradContribution& a, const GradContribution& b) {
    if (a.partition != b.partition) return a.partition < b.partition;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.param < b.param;
  });
  std::vector<ExactTensor> total;
  total.reserve(layout.size());
  for (const auto& t : layout.tensors) total.emplace_back(t.rows(), t.cols());
  for (const auto& c : contributions) {
    if (c.param >= total.size()) throw RangeError("gradient contribution for unknown parameter");
    if (c.grad.rows() != total[c.param].rows() || c.grad.cols() != total[c.param].cols()) {
      throw ShapeError("gradient contribution shape mismatch for '" + layout.names[c.param] + "'");
    }
    total[c.param].merge(c.grad);
  }
  ParameterSet out;
  out.names = layout.names;
  for (const auto& t : total) out.tensors.push_back(t.to_tensor());
  return out;
}

// ---------------------------------------------------------------------------

struct Execution::EdgeBatch {
  std::vector<edge_id> edges;
  std::vector<std::int32_t> src_row;
  std::vector<std::int32_t> dst_row;
  std::vector<std::int32_t> acc_row;
  Tape tape;
  GatherInputs in;
  GatherOutputs out;
  std::vector<real> expo;

  void push(edge_id e, std::int32_t s, std::int32_t d, std::int32_t a) {
    edges.push_back(e);
    src_row.push_back(s);
    dst_row.push_back(d);
    acc_row.push_back(a);
  }
};

struct Execution::LayerFrame {
  bool live = false;
  std::vector<node_id> t_nodes;
  std::vector<node_id> d_nodes;
  std::vector<node_id> mirrors;
  std::vector<std::int32_t> d_to_t;
  std::vector<std::int32_t> t_of_master;
  std::vector<std::int32_t> d_of_master;
  std::vector<std::vector<part_id>> hosts;

  Tensor n;
  Tape transform_tape;
  Tape::Var t_in = kNoVar;
  Tape::Var t_out = kNoVar;
  EdgeBatch csr;
  EdgeBatch csc;

  ExactTensor acc;
  ExactTensor mirror_acc;
  std::vector<std::uint64_t> count;
  std::vector<std::uint64_t> mirror_count;
  std::vector<real> max_d;
  std::vector<real> max_m;
  std::vector<fixed_t> z_d;
  std::vector<fixed_t> z_m;
  std::vector<real> z_value;
  std::vector<real> divisor;

  Tensor m;
  Tape apply_tape;
  Tape::Var a_m = kNoVar;
  Tape::Var a_n = kNoVar;
  Tape::Var a_out = kNoVar;
  Tensor h;

  Tensor grad_h;
  Tensor grad_m;
  std::vector<real> dot_d;
  ExactTensor grad_n;
  Tensor mirror_grad_m;
  std::vector<real> mirror_z;
  std::vector<real> mirror_dot;

  std::size_t t_count() const { return t_nodes.size(); }
};

struct Execution::PartState {
  std::vector<LayerFrame> frames;
  /// Messages drained at the last barrier.
  std::vector<std::pair<part_id, StageMessage>> inbox;
  std::vector<ExactTensor> sinks;
  EngineCounters counters;
  std::vector<node_id> input_nodes;
  Tensor input_grad;
};

Execution::Execution(const Graph& g, const PartitionPlan& plan, const GraphView& view, Transport& transport,
                     TaskScheduler* scheduler)
    : g_(g), plan_(plan), view_(view), transport_(transport), scheduler_(scheduler) {
  if (transport.partition_count() != plan.partition_count()) {
    throw ConfigError("transport and partition plan disagree on the partition count");
  }
  if (plan.master_map().size() != g.num_nodes()) throw ConfigError("partition plan does not match the graph");
  for (std::size_t p = 0; p < plan.partition_count(); ++p) {
    auto ps = std::make_unique<PartState>();
    ps->frames.resize(static_cast<std::size_t>(view.layers()) + 1);
    parts_.push_back(std::move(ps));
  }
}

Execution::~Execution() { release_all(); }

template <typename Fn>
void Execution::each_partition(Fn&& fn) {
  const std::size_t parts = plan_.partition_count();
  if (scheduler_ && scheduler_->workers() > 1 && parts > 1) {
    scheduler_->parallel_for(parts, [&](std::size_t p) { fn(static_cast<part_id>(p)); });
  } else {
    for (std::size_t p = 0; p < parts; ++p) fn(static_cast<part_id>(p));
  }
}

void Execution::deliver() {
  for (part_id p = 0; p < parts_.size(); ++p) {
    auto& inbox = parts_[p]->inbox;
    if (!inbox.empty()) throw Error("partition " + std::to_string(p) + " left messages unread");
    inbox = transport_.drain(p);
  }
}

void Execution::prepare_sinks(const ParameterSet& params) {
  for (auto& ps : parts_) {
    if (ps->sinks.size() == params.size()) continue;
    ps->sinks.clear();
    for (const auto& t : params.tensors) ps->sinks.emplace_back(t.rows(), t.cols());
  }
}

std::vector<ExactTensor>& Execution::sinks(part_id p) { return parts_[p]->sinks; }

std::vector<GradContribution> Execution::contributions(const std::vector<int>& layer_of_param) const {
  std::vector<GradContribution> out;
  for (part_id p = 0; p < parts_.size(); ++p) {
    const auto& sinks = parts_[p]->sinks;
    if (sinks.size() != layer_of_param.size()) throw ShapeError("layer tag list does not match the parameter count");
    for (std::size_t i = 0; i < sinks.size(); ++i) out.push_back({p, layer_of_param[i], i, sinks[i]});
  }
  return out;
}

EngineCounters Execution::counters() const {
  EngineCounters c;
  for (const auto& ps : parts_) c.merge(ps->counters);
  return c;
}

void Execution::release(PartState& ps, int layer) {
  auto& f = ps.frames[static_cast<std::size_t>(layer)];
  if (!f.live) return;
  f = LayerFrame{};
  ++ps.counters.frames_released;
}

void Execution::release_all() {
  for (auto& ps : parts_)
    for (std::size_t k = 0; k < ps->frames.size(); ++k) release(*ps, static_cast<int>(k));
}

const std::vector<node_id>& Execution::output_nodes(part_id p) const {
  return parts_[p]->frames[static_cast<std::size_t>(last_layer_)].d_nodes;
}

const Tensor& Execution::output(part_id p) const {
  return parts_[p]->frames[static_cast<std::size_t>(last_layer_)].h;
}

void Execution::set_output_grad(part_id p, Tensor grad) {
  auto& f = parts_[p]->frames[static_cast<std::size_t>(last_layer_)];
  if (!f.live) throw Error("no forward frame to receive an output gradient");
  if (!grad.same_shape(f.h)) throw ShapeError("output gradient shape does not match the layer output");
  f.grad_h = std::move(grad);
}

const std::vector<node_id>& Execution::input_nodes(part_id p) const { return parts_[p]->input_nodes; }
const Tensor& Execution::input_grad(part_id p) const { return parts_[p]->input_grad; }

// ---------------------------------------------------------------------------
// Forward

void Execution::forward_layer(const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx) {
  const int k = prog.layer;
  if (k != last_layer_ + 1 || k > view_.layers()) {
    throw Error("forward_layer(" + std::to_string(k) + ") called out of order");
  }
  if (!prog.transform || !prog.gather || !prog.apply) throw ConfigError("layer program is missing a stage function");
  if (prog.uses_edge_features && g_.edge_feature_dim() == 0) {
    throw ConfigError("layer " + std::to_string(k) + " needs edge features but the graph has none");
  }
  prepare_sinks(params);
  each_partition([&](part_id p) { f_local(p, prog, params, ctx); });
  deliver();
  each_partition([&](part_id p) { f_remote(p, prog, params, ctx); });
  if (prog.acc == AccKind::attention) {
    deliver();
    each_partition([&](part_id p) { f_attention_max(p, prog); });
    deliver();
    each_partition([&](part_id p) { f_attention_remote_sums(p, prog); });
  }
  deliver();
  each_partition([&](part_id p) { f_finish(p, prog, params, ctx); });
  last_layer_ = k;
}

void Execution::run_gather(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx,
                           LayerFrame& f, EdgeBatch& b) {
  const std::size_t e_count = b.edges.size();
  if (e_count == 0) return;
  const std::size_t d = prog.out_dim;
  Tensor src(e_count, d), dst(e_count, d), coef(e_count, 1, real{1});
  for (std::size_t i = 0; i < e_count; ++i) {
    auto s = f.n.row(static_cast<std::size_t>(b.src_row[i]));
    auto t = f.n.row(static_cast<std::size_t>(b.dst_row[i]));
    std::copy(s.begin(), s.end(), src.row(i).begin());
    std::copy(t.begin(), t.end(), dst.row(i).begin());
    if (!prog.edge_coefficient.empty()) coef[i] = prog.edge_coefficient[b.edges[i]];
  }
  b.in.src = b.tape.leaf(std::move(src), true);
  b.in.dst = b.tape.leaf(std::move(dst), true);
  b.in.coefficient = b.tape.leaf(std::move(coef), false);
  if (prog.uses_edge_features) {
    const auto& ef = g_.edge_features();
    Tensor rows(e_count, ef.cols());
    for (std::size_t i = 0; i < e_count; ++i) {
      auto r = ef.row(b.edges[i]);
      std::copy(r.begin(), r.end(), rows.row(i).begin());
    }
    b.in.edge_features = b.tape.leaf(std::move(rows), false);
  }
  ParamBinder bind(params, &parts_[p]->sinks);
  b.out = prog.gather(b.tape, bind, b.in, ctx);
  const Tensor& msg = b.tape.value(b.out.message);
  if (msg.rows() != e_count || msg.cols() != d) throw ShapeError("gather produced a message of the wrong shape");
  if (prog.acc == AccKind::attention) {
    if (b.out.score == kNoVar) throw ConfigError("attention aggregation needs a gather score output");
    const Tensor& s = b.tape.value(b.out.score);
    if (s.rows() != e_count || s.cols() != 1) throw ShapeError("attention score must be one column per edge");
  }
  parts_[p]->counters.gather_invocations += e_count;
}

void Execution::f_local(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  f = LayerFrame{};
  f.live = true;
  ++ps.counters.frames_allocated;

  const auto& masters = plan_.masters_of(p);
  f.t_of_master.assign(masters.size(), -1);
  f.d_of_master.assign(masters.size(), -1);
  for (std::size_t li = 0; li < masters.size(); ++li) {
    const node_id v = masters[li];
    const int ml = view_.max_layer(v);
    if (ml >= k - 1) {
      f.t_of_master[li] = static_cast<std::int32_t>(f.t_nodes.size());
      f.t_nodes.push_back(v);
    }
    if (ml >= k) {
      f.d_of_master[li] = static_cast<std::int32_t>(f.d_nodes.size());
      f.d_nodes.push_back(v);
      f.d_to_t.push_back(f.t_of_master[li]);
    }
  }

  // NN-Transform on every local master that feeds this layer.
  Tensor x;
  if (k == 1) {
    const auto& feats = g_.node_features();
    x = Tensor(f.t_nodes.size(), feats.cols());
    for (std::size_t r = 0; r < f.t_nodes.size(); ++r) {
      auto src = feats.row(f.t_nodes[r]);
      std::copy(src.begin(), src.end(), x.row(r).begin());
    }
    ps.input_nodes = f.t_nodes;
  } else {
    auto& prev = ps.frames[static_cast<std::size_t>(k - 1)];
    if (!prev.live || prev.d_nodes != f.t_nodes) throw Error("layer inputs missing: run the previous layer first");
    x = prev.h;
  }
  if (x.cols() != prog.in_dim) {
    throw ShapeError("layer " + std::to_string(k) + " expects input width " + std::to_string(prog.in_dim) + ", got " +
                     std::to_string(x.cols()));
  }
  StageContext node_ctx = ctx;
  node_ctx.nodes = f.t_nodes;
  ParamBinder bind(params, &ps.sinks);
  f.t_in = f.transform_tape.leaf(std::move(x), k > 1 || input_grad_);
  f.t_out = prog.transform(f.transform_tape, bind, f.t_in, node_ctx);
  const Tensor& nt = f.transform_tape.value(f.t_out);
  if (nt.rows() != f.t_nodes.size() || nt.cols() != prog.out_dim) {
    throw ShapeError("transform produced the wrong shape on layer " + std::to_string(k));
  }

  // CSR pass over out-edges of local masters; mirror destinations are skipped
  // here and handled by the owning partition's CSC pass after sync.
  std::vector<node_id> mirror_dsts;
  for (std::size_t r = 0; r < f.t_nodes.size(); ++r) {
    for (auto e : g_.out_edges(f.t_nodes[r])) {
      if (!view_.edge_used(g_, e, k)) continue;
      const node_id i = g_.dst(e);
      if (plan_.master_of(i) == p) {
        const auto drow = f.d_of_master[plan_.local_id(p, i)];
        if (drow < 0) throw Error("internal error: used edge into an inactive destination");
        f.csr.push(e, static_cast<std::int32_t>(r), f.d_to_t[static_cast<std::size_t>(drow)], drow);
      } else {
        ++ps.counters.csr_skipped_edges;
        mirror_dsts.push_back(i);
      }
    }
  }
  std::sort(mirror_dsts.begin(), mirror_dsts.end());
  mirror_dsts.erase(std::unique(mirror_dsts.begin(), mirror_dsts.end()), mirror_dsts.end());
  f.mirrors = std::move(mirror_dsts);

  const std::size_t d = prog.out_dim;
  f.n = Tensor(f.t_count() + f.mirrors.size(), d);
  std::copy(nt.values().begin(), nt.values().end(), f.n.values().begin());

  // Partitions holding an active mirror of each destination master.
  f.hosts.assign(f.d_nodes.size(), {});
  for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
    auto& hosts = f.hosts[r];
    for (auto e : g_.in_edges(f.d_nodes[r])) {
      if (!view_.edge_used(g_, e, k)) continue;
      const part_id q = plan_.master_of(g_.src(e));
      if (q != p) hosts.push_back(q);
    }
    std::sort(hosts.begin(), hosts.end());
    hosts.erase(std::unique(hosts.begin(), hosts.end()), hosts.end());
    for (auto q : hosts) {
      StageMessage msg;
      msg.kind = MessageKind::master_to_mirror_value;
      msg.layer = static_cast<std::uint16_t>(k);
      msg.node = f.d_nodes[r];
      auto row = f.n.row(static_cast<std::size_t>(f.d_to_t[r]));
      msg.values.assign(row.begin(), row.end());
      transport_.send(p, q, std::move(msg));
      bump(ps.counters.forward_value_syncs, static_cast<std::size_t>(k));
    }
  }

  for (auto e : f.csr.edges)
    if (!plan_.is_master(p, g_.dst(e))) ++ps.counters.csr_mirror_gathers;
  run_gather(p, prog, params, ctx, f, f.csr);

  f.acc = ExactTensor(f.d_nodes.size(), d);
  f.count.assign(f.d_nodes.size(), 0);
  if (prog.acc == AccKind::attention) {
    f.max_d.assign(f.d_nodes.size(), kNegInf);
    if (!f.csr.edges.empty()) {
      const Tensor& s = f.csr.tape.value(f.csr.out.score);
      for (std::size_t i = 0; i < f.csr.edges.size(); ++i) {
        auto& mx = f.max_d[static_cast<std::size_t>(f.csr.acc_row[i])];
        mx = std::max(mx, s[i]);
      }
    }
    for (auto a : f.csr.acc_row) ++f.count[static_cast<std::size_t>(a)];
  } else if (!f.csr.edges.empty()) {
    const Tensor& msg = f.csr.tape.value(f.csr.out.message);
    for (std::size_t i = 0; i < f.csr.edges.size(); ++i) {
      const auto a = static_cast<std::size_t>(f.csr.acc_row[i]);
      f.acc.add_row(a, msg.row(i));
      ++f.count[a];
    }
  }
}

void Execution::f_remote(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  std::vector<int> received(f.mirrors.size(), 0);
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::master_to_mirror_value || msg.backward || msg.layer != k || msg.round != 0) {
      throw Error("unexpected message during mirror sync");
    }
    const auto it = std::lower_bound(f.mirrors.begin(), f.mirrors.end(), msg.node);
    if (it == f.mirrors.end() || *it != msg.node) {
      throw Error("undeliverable value for node " + std::to_string(msg.node) + " at partition " + std::to_string(p));
    }
    const auto idx = static_cast<std::size_t>(it - f.mirrors.begin());
    if (msg.values.size() != d) throw ShapeError("mirror sync payload has the wrong width");
    std::copy(msg.values.begin(), msg.values.end(), f.n.row(f.t_count() + idx).begin());
    ++received[idx];
  }
  for (std::size_t idx = 0; idx < received.size(); ++idx) {
    if (received[idx] != 1) {
      throw Error("mirror " + std::to_string(f.mirrors[idx]) + " received " + std::to_string(received[idx]) +
                  " values instead of 1");
    }
  }

  // CSC pass: in-edges of each active mirror whose source is a local master.
  for (std::size_t idx = 0; idx < f.mirrors.size(); ++idx) {
    for (auto e : g_.in_edges(f.mirrors[idx])) {
      if (!view_.edge_used(g_, e, k)) continue;
      const node_id j = g_.src(e);
      if (plan_.master_of(j) != p) continue;
      const auto trow = f.t_of_master[plan_.local_id(p, j)];
      if (trow < 0) throw Error("inactive neighbor " + std::to_string(j) + " touched on layer " + std::to_string(k));
      f.csc.push(e, trow, static_cast<std::int32_t>(f.t_count() + idx), static_cast<std::int32_t>(idx));
    }
  }
  run_gather(p, prog, params, ctx, f, f.csc);

  f.mirror_acc = ExactTensor(f.mirrors.size(), d);
  f.mirror_count.assign(f.mirrors.size(), 0);
  for (auto a : f.csc.acc_row) ++f.mirror_count[static_cast<std::size_t>(a)];
  if (prog.acc == AccKind::attention) {
    f.max_m.assign(f.mirrors.size(), kNegInf);
    if (!f.csc.edges.empty()) {
      const Tensor& s = f.csc.tape.value(f.csc.out.score);
      for (std::size_t i = 0; i < f.csc.edges.size(); ++i) {
        auto& mx = f.max_m[static_cast<std::size_t>(f.csc.acc_row[i])];
        mx = std::max(mx, s[i]);
      }
    }
    for (std::size_t idx = 0; idx < f.mirrors.size(); ++idx) {
      StageMessage msg;
      msg.kind = MessageKind::mirror_to_master_partial;
      msg.layer = static_cast<std::uint16_t>(k);
      msg.round = 1;
      msg.node = f.mirrors[idx];
      msg.values = {f.max_m[idx]};
      transport_.send(p, plan_.master_of(f.mirrors[idx]), std::move(msg));
    }
    return;
  }
  if (!f.csc.edges.empty()) {
    const Tensor& msg = f.csc.tape.value(f.csc.out.message);
    for (std::size_t i = 0; i < f.csc.edges.size(); ++i)
      f.mirror_acc.add_row(static_cast<std::size_t>(f.csc.acc_row[i]), msg.row(i));
  }
  for (std::size_t idx = 0; idx < f.mirrors.size(); ++idx) {
    StageMessage msg;
    msg.kind = MessageKind::mirror_to_master_partial;
    msg.layer = static_cast<std::uint16_t>(k);
    msg.node = f.mirrors[idx];
    msg.exact.resize(d);
    for (std::size_t c = 0; c < d; ++c) msg.exact[c] = f.mirror_acc.raw(idx * d + c);
    msg.count = f.mirror_count[idx];
    transport_.send(p, plan_.master_of(f.mirrors[idx]), std::move(msg));
  }
}

void Execution::f_attention_max(part_id p, const LayerProgram& prog) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::mirror_to_master_partial || msg.round != 1 || msg.layer != k) {
      throw Error("unexpected message while merging attention maxima");
    }
    const auto drow = f.d_of_master[plan_.local_id(p, msg.node)];
    if (drow < 0) throw Error("partial maximum for an inactive node");
    auto& mx = f.max_d[static_cast<std::size_t>(drow)];
    mx = std::max(mx, msg.values.at(0));
  }
  for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
    for (auto q : f.hosts[r]) {
      StageMessage msg;
      msg.kind = MessageKind::master_to_mirror_value;
      msg.layer = static_cast<std::uint16_t>(k);
      msg.round = 1;
      msg.node = f.d_nodes[r];
      msg.values = {f.max_d[r]};
      transport_.send(p, q, std::move(msg));
    }
  }
  f.z_d.assign(f.d_nodes.size(), 0);
  auto& b = f.csr;
  b.expo.resize(b.edges.size());
  if (b.edges.empty()) return;
  const Tensor& s = b.tape.value(b.out.score);
  const Tensor& msg = b.tape.value(b.out.message);
  for (std::size_t i = 0; i < b.edges.size(); ++i) {
    const auto a = static_cast<std::size_t>(b.acc_row[i]);
    const real w = std::exp(s[i] - f.max_d[a]);
    b.expo[i] = w;
    f.z_d[a] += to_fixed(w);
    for (std::size_t c = 0; c < d; ++c) f.acc.add(a, c, w * msg(i, c));
  }
}

void Execution::f_attention_remote_sums(part_id p, const LayerProgram& prog) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::master_to_mirror_value || msg.round != 1 || msg.layer != k) {
      throw Error("unexpected message while distributing attention maxima");
    }
    const auto it = std::lower_bound(f.mirrors.begin(), f.mirrors.end(), msg.node);
    if (it == f.mirrors.end() || *it != msg.node) throw Error("undeliverable attention maximum");
    f.max_m[static_cast<std::size_t>(it - f.mirrors.begin())] = msg.values.at(0);
  }
  f.z_m.assign(f.mirrors.size(), 0);
  auto& b = f.csc;
  b.expo.resize(b.edges.size());
  if (!b.edges.empty()) {
    const Tensor& s = b.tape.value(b.out.score);
    const Tensor& msg = b.tape.value(b.out.message);
    for (std::size_t i = 0; i < b.edges.size(); ++i) {
      const auto a = static_cast<std::size_t>(b.acc_row[i]);
      const real w = std::exp(s[i] - f.max_m[a]);
      b.expo[i] = w;
      f.z_m[a] += to_fixed(w);
      for (std::size_t c = 0; c < d; ++c) f.mirror_acc.add(a, c, w * msg(i, c));
    }
  }
  for (std::size_t idx = 0; idx < f.mirrors.size(); ++idx) {
    StageMessage msg;
    msg.kind = MessageKind::mirror_to_master_partial;
    msg.layer = static_cast<std::uint16_t>(k);
    msg.round = 2;
    msg.node = f.mirrors[idx];
    msg.exact.resize(d + 1);
    for (std::size_t c = 0; c < d; ++c) msg.exact[c] = f.mirror_acc.raw(idx * d + c);
    msg.exact[d] = f.z_m[idx];
    msg.count = f.mirror_count[idx];
    transport_.send(p, plan_.master_of(f.mirrors[idx]), std::move(msg));
  }
}

void Execution::f_finish(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  const bool attention = prog.acc == AccKind::attention;
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::mirror_to_master_partial || msg.layer != k || msg.round != (attention ? 2 : 0)) {
      throw Error("unexpected message while merging partial aggregates");
    }
    const auto drow = f.d_of_master[plan_.local_id(p, msg.node)];
    if (drow < 0) throw Error("partial aggregate for an inactive node");
    const auto r = static_cast<std::size_t>(drow);
    if (msg.exact.size() != d + (attention ? 1 : 0)) throw ShapeError("partial aggregate has the wrong width");
    for (std::size_t c = 0; c < d; ++c) f.acc.add_raw(r * d + c, msg.exact[c]);
    if (attention) f.z_d[r] += msg.exact[d];
    f.count[r] += msg.count;
  }

  // Sum: finalize M on destination masters.
  f.m = f.acc.to_tensor();
  if (prog.acc == AccKind::mean) {
    f.divisor.resize(f.d_nodes.size());
    for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
      const real div = prog.mean_mode == MeanMode::global ? static_cast<real>(g_.in_degree(f.d_nodes[r]))
                                                          : static_cast<real>(f.count[r]);
      f.divisor[r] = div;
      for (auto& v : f.m.row(r)) v = div > 0 ? v / div : real{0};
    }
  } else if (attention) {
    f.z_value.resize(f.d_nodes.size());
    for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
      const real z = from_fixed(f.z_d[r]);
      f.z_value[r] = z;
      for (auto& v : f.m.row(r)) v = z > 0 ? v / z : real{0};
    }
  }

  // NN-Apply on masters only; mirrors are refreshed at the next layer's sync.
  Tensor n_rows(f.d_nodes.size(), d);
  Tensor diag(f.d_nodes.size(), 1);
  for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
    auto src = f.n.row(static_cast<std::size_t>(f.d_to_t[r]));
    std::copy(src.begin(), src.end(), n_rows.row(r).begin());
    if (!prog.node_coefficient.empty()) diag[r] = prog.node_coefficient[f.d_nodes[r]];
  }
  StageContext node_ctx = ctx;
  node_ctx.nodes = f.d_nodes;
  ParamBinder bind(params, &ps.sinks);
  f.a_m = f.apply_tape.leaf(f.m, true);
  f.a_n = f.apply_tape.leaf(std::move(n_rows), true);
  const auto diag_var = f.apply_tape.leaf(std::move(diag), false);
  f.a_out = prog.apply(f.apply_tape, bind, f.a_m, f.a_n, diag_var, node_ctx);
  f.h = f.apply_tape.value(f.a_out);
  if (f.h.rows() != f.d_nodes.size() || f.h.cols() != d) throw ShapeError("apply produced the wrong shape");
}

std::vector<real> Execution::attention_weights(int layer) const {
  std::vector<real> out(g_.num_edges(), std::numeric_limits<real>::quiet_NaN());
  const auto k = static_cast<std::size_t>(layer);
  for (part_id p = 0; p < parts_.size(); ++p) {
    const auto& f = parts_[p]->frames[k];
    if (!f.live) throw Error("attention weights requested for a released frame");
    for (std::size_t i = 0; i < f.csr.edges.size(); ++i) {
      out[f.csr.edges[i]] = f.csr.expo[i] / f.z_value[static_cast<std::size_t>(f.csr.acc_row[i])];
    }
    for (std::size_t i = 0; i < f.csc.edges.size(); ++i) {
      const node_id v = f.mirrors[static_cast<std::size_t>(f.csc.acc_row[i])];
      const part_id q = plan_.master_of(v);
      const auto& fq = parts_[q]->frames[k];
      const auto drow = fq.d_of_master[plan_.local_id(q, v)];
      out[f.csc.edges[i]] = f.csc.expo[i] / fq.z_value[static_cast<std::size_t>(drow)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

void Execution::backward_layer(const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx) {
  (void)ctx;
  const int k = prog.layer;
  if (k != last_layer_ || k < 1) throw Error("backward_layer(" + std::to_string(k) + ") called out of order");
  prepare_sinks(params);
  each_partition([&](part_id p) { b_local(p, prog); });
  deliver();
  each_partition([&](part_id p) { b_remote(p, prog); });
  deliver();
  each_partition([&](part_id p) { b_transform(p, prog); });
  last_layer_ = k - 1;
}

bool Execution::backward_gather(const LayerProgram& prog, LayerFrame& f, EdgeBatch& b, const Tensor& grad_m,
                                const std::vector<real>& z, const std::vector<real>& dot) {
  const std::size_t e_count = b.edges.size();
  if (e_count == 0) return false;
  const std::size_t d = prog.out_dim;
  const Tensor& msg = b.tape.value(b.out.message);
  Tensor g_msg(e_count, d);
  Tensor g_score;
  const bool attention = prog.acc == AccKind::attention;
  if (attention) g_score = Tensor(e_count, 1);
  for (std::size_t i = 0; i < e_count; ++i) {
    const auto a = static_cast<std::size_t>(b.acc_row[i]);
    auto gm = grad_m.row(a);
    if (!attention) {
      std::copy(gm.begin(), gm.end(), g_msg.row(i).begin());
      continue;
    }
    const real alpha = b.expo[i] / z[a];
    real gm_dot_m = 0;
    for (std::size_t c = 0; c < d; ++c) {
      g_msg(i, c) = alpha * gm[c];
      gm_dot_m += gm[c] * msg(i, c);
    }
    g_score[i] = alpha * (gm_dot_m - dot[a]);
  }
  b.tape.seed(b.out.message, g_msg);
  if (attention) b.tape.seed(b.out.score, g_score);
  b.tape.backward();
  const Tensor& gs = b.tape.grad(b.in.src);
  const Tensor& gd = b.tape.grad(b.in.dst);
  if (!gs.empty()) {
    for (std::size_t i = 0; i < e_count; ++i) f.grad_n.add_row(static_cast<std::size_t>(b.src_row[i]), gs.row(i));
  }
  if (!gd.empty()) {
    for (std::size_t i = 0; i < e_count; ++i) f.grad_n.add_row(static_cast<std::size_t>(b.dst_row[i]), gd.row(i));
  }
  return !gd.empty();
}

void Execution::b_local(part_id p, const LayerProgram& prog) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  if (!f.live) throw Error("backward on a released frame");
  const std::size_t d = prog.out_dim;
  if (f.grad_h.empty()) f.grad_h = Tensor(f.d_nodes.size(), d);
  f.grad_n = ExactTensor(f.t_count() + f.mirrors.size(), d);

  // NN-Apply derivative: dL/dM and the direct dL/dn term.
  f.apply_tape.seed(f.a_out, f.grad_h);
  f.apply_tape.backward();
  f.grad_m = f.apply_tape.grad(f.a_m).empty() ? Tensor(f.d_nodes.size(), d) : f.apply_tape.grad(f.a_m);
  const Tensor& direct = f.apply_tape.grad(f.a_n);
  if (!direct.empty()) {
    for (std::size_t r = 0; r < f.d_nodes.size(); ++r)
      f.grad_n.add_row(static_cast<std::size_t>(f.d_to_t[r]), direct.row(r));
  }
  const bool attention = prog.acc == AccKind::attention;
  if (prog.acc == AccKind::mean) {
    for (std::size_t r = 0; r < f.d_nodes.size(); ++r)
      for (auto& v : f.grad_m.row(r)) v = f.divisor[r] > 0 ? v / f.divisor[r] : real{0};
  }
  if (attention) {
    f.dot_d.assign(f.d_nodes.size(), 0);
    for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
      real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += f.grad_m(r, c) * f.m(r, c);
      f.dot_d[r] = s;
    }
  }

  for (std::size_t r = 0; r < f.d_nodes.size(); ++r) {
    for (auto q : f.hosts[r]) {
      StageMessage msg;
      msg.kind = MessageKind::master_to_mirror_value;
      msg.backward = true;
      msg.layer = static_cast<std::uint16_t>(k);
      msg.node = f.d_nodes[r];
      auto row = f.grad_m.row(r);
      msg.values.assign(row.begin(), row.end());
      if (attention) {
        msg.values.push_back(f.z_value[r]);
        msg.values.push_back(f.dot_d[r]);
      }
      transport_.send(p, q, std::move(msg));
      bump(ps.counters.backward_value_syncs, static_cast<std::size_t>(k));
    }
  }
  backward_gather(prog, f, f.csr, f.grad_m, f.z_value, f.dot_d);
}

void Execution::b_remote(part_id p, const LayerProgram& prog) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  const bool attention = prog.acc == AccKind::attention;
  f.mirror_grad_m = Tensor(f.mirrors.size(), d);
  f.mirror_z.assign(f.mirrors.size(), 0);
  f.mirror_dot.assign(f.mirrors.size(), 0);
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::master_to_mirror_value || !msg.backward || msg.layer != k) {
      throw Error("unexpected message during backward mirror sync");
    }
    const auto it = std::lower_bound(f.mirrors.begin(), f.mirrors.end(), msg.node);
    if (it == f.mirrors.end() || *it != msg.node) throw Error("undeliverable gradient for node " + std::to_string(msg.node));
    const auto idx = static_cast<std::size_t>(it - f.mirrors.begin());
    if (msg.values.size() != d + (attention ? 2 : 0)) throw ShapeError("gradient sync payload has the wrong width");
    std::copy(msg.values.begin(), msg.values.begin() + static_cast<std::ptrdiff_t>(d), f.mirror_grad_m.row(idx).begin());
    if (attention) {
      f.mirror_z[idx] = msg.values[d];
      f.mirror_dot[idx] = msg.values[d + 1];
    }
  }
  const bool dst_grads = backward_gather(prog, f, f.csc, f.mirror_grad_m, f.mirror_z, f.mirror_dot);
  if (!dst_grads) return;
  for (std::size_t idx = 0; idx < f.mirrors.size(); ++idx) {
    StageMessage msg;
    msg.kind = MessageKind::gradient_to_dest;
    msg.backward = true;
    msg.layer = static_cast<std::uint16_t>(k);
    msg.node = f.mirrors[idx];
    msg.exact.resize(d);
    const std::size_t row = f.t_count() + idx;
    for (std::size_t c = 0; c < d; ++c) msg.exact[c] = f.grad_n.raw(row * d + c);
    transport_.send(p, plan_.master_of(f.mirrors[idx]), std::move(msg));
  }
}

void Execution::b_transform(part_id p, const LayerProgram& prog) {
  auto& ps = *parts_[p];
  const int k = prog.layer;
  auto& f = ps.frames[static_cast<std::size_t>(k)];
  const std::size_t d = prog.out_dim;
  for (auto& [from, msg] : std::exchange(ps.inbox, {})) {
    if (msg.kind != MessageKind::gradient_to_dest || msg.layer != k) {
      throw Error("unexpected message while merging destination gradients");
    }
    const auto trow = f.t_of_master[plan_.local_id(p, msg.node)];
    if (trow < 0) throw Error("destination gradient for an inactive node");
    for (std::size_t c = 0; c < d; ++c) f.grad_n.add_raw(static_cast<std::size_t>(trow) * d + c, msg.exact[c]);
  }

  // NN-Transform derivative: dL/dh_prev and the weight gradients.
  Tensor gn(f.t_count(), d);
  for (std::size_t r = 0; r < f.t_count(); ++r)
    for (std::size_t c = 0; c < d; ++c) gn(r, c) = from_fixed(f.grad_n.raw(r * d + c));
  f.transform_tape.seed(f.t_out, gn);
  f.transform_tape.backward();
  Tensor gh = f.transform_tape.grad(f.t_in);
  if (gh.empty()) gh = Tensor(f.t_count(), prog.in_dim);
  if (k > 1) {
    ps.frames[static_cast<std::size_t>(k - 1)].grad_h = std::move(gh);
  } else {
    ps.input_grad = std::move(gh);
  }
  release(ps, k);
}

}  // namespace tgar
