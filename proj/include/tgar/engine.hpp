#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "tgar/autodiff.hpp"
#include "tgar/graph.hpp"
#include "tgar/graph_view.hpp"
#include "tgar/parameters.hpp"
#include "tgar/partition.hpp"
#include "tgar/scheduler.hpp"

namespace tgar {

enum class MessageKind : std::uint8_t {
  master_to_mirror_value,
  mirror_to_master_partial,
  gradient_to_source,
  gradient_to_dest,
  param_grad_contribution,
};
inline constexpr std::size_t kMessageKinds = 5;

struct StageMessage {
  MessageKind kind = MessageKind::master_to_mirror_value;
  std::uint16_t layer = 0;
  /// Sub-round within a stage (attention needs several).
  std::uint8_t round = 0;
  bool backward = false;
  node_id node = 0;
  std::vector<real> values;
  /// Fixed-point partial sums travel unrounded.
  std::vector<fixed_t> exact;
  /// Edge count contributing to a partial (mean aggregation).
  std::uint64_t count = 0;

  std::size_t bytes() const;
};

/// Reliable, ordered, per-pair FIFO delivery between partitions.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::size_t partition_count() const = 0;
  virtual void send(part_id from, part_id to, StageMessage msg) = 0;
  /// Everything addressed to `to`, ascending by sender, FIFO per sender.
  virtual std::vector<std::pair<part_id, StageMessage>> drain(part_id to) = 0;
};

class InMemoryTransport final : public Transport {
 public:
  explicit InMemoryTransport(std::size_t partitions);
  std::size_t partition_count() const override { return partitions_; }
  void send(part_id from, part_id to, StageMessage msg) override;
  std::vector<std::pair<part_id, StageMessage>> drain(part_id to) override;

  std::uint64_t messages() const { return messages_.load(); }
  std::uint64_t bytes() const { return bytes_.load(); }
  std::uint64_t messages_of(MessageKind k) const { return by_kind_[static_cast<std::size_t>(k)].load(); }
  void reset_counters();

 private:
  struct Mailbox {
    std::mutex mu;
    std::vector<StageMessage> queue;
  };
  std::size_t partitions_;
  std::vector<std::unique_ptr<Mailbox>> boxes_;
  std::atomic<std::uint64_t> messages_{0};
  std::atomic<std::uint64_t> bytes_{0};
  std::array<std::atomic<std::uint64_t>, kMessageKinds> by_kind_{};
};

enum class AccKind { sum, mean, attention };
enum class MeanMode {
  /// Divide by the number of in-edges used in the view.
  active,
  /// Divide by the full in-degree in the graph.
  global,
};

struct StageContext {
  int layer = 1;
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  /// Global ids of the rows handed to a node-wise stage.
  std::span<const node_id> nodes;
};

/// Hands parameters to a tape, routing gradients into per-partition sinks.
class ParamBinder {
 public:
  ParamBinder(const ParameterSet& values, std::vector<ExactTensor>* sinks) : values_(values), sinks_(sinks) {}
  Tape::Var operator()(Tape& t, std::size_t index) const {
    return t.param(&values_.tensors[index], sinks_ ? &(*sinks_)[index] : nullptr);
  }

 private:
  const ParameterSet& values_;
  std::vector<ExactTensor>* sinks_;
};

inline constexpr Tape::Var kNoVar = static_cast<Tape::Var>(-1);

struct GatherInputs {
  /// Rows: n of the source, n of the destination, edge features, and a
  /// constant per-edge coefficient column.
  Tape::Var src = kNoVar;
  Tape::Var dst = kNoVar;
  Tape::Var edge_features = kNoVar;
  Tape::Var coefficient = kNoVar;
};

struct GatherOutputs {
  Tape::Var message = kNoVar;
  /// Unnormalized attention score column (attention aggregation only).
  Tape::Var score = kNoVar;
};

/// One layer as NN-Transform / NN-Gather / Sum / NN-Apply. Each function
/// builds its forward on a tape; the tape supplies the matching backward.
struct LayerProgram {
  int layer = 1;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  AccKind acc = AccKind::sum;
  MeanMode mean_mode = MeanMode::active;
  bool uses_edge_features = false;

  std::function<Tape::Var(Tape&, const ParamBinder&, Tape::Var h_prev, const StageContext&)> transform;
  std::function<GatherOutputs(Tape&, const ParamBinder&, const GatherInputs&, const StageContext&)> gather;
  /// `diag` is a constant rows x 1 column of per-node self coefficients.
  std::function<Tape::Var(Tape&, const ParamBinder&, Tape::Var m, Tape::Var n, Tape::Var diag, const StageContext&)>
      apply;

  /// Per-edge constant coefficient (indexed by global edge id); empty means 1.
  std::vector<real> edge_coefficient;
  /// Per-node constant for apply (indexed by global node id); empty means 0.
  std::vector<real> node_coefficient;
};

struct EngineCounters {
  std::uint64_t gather_invocations = 0;
  /// Gather calls in the CSR pass whose destination was a mirror. Must stay 0.
  std::uint64_t csr_mirror_gathers = 0;
  /// Owned edges skipped by the CSR pass because the destination is a mirror.
  std::uint64_t csr_skipped_edges = 0;
  std::uint64_t frames_allocated = 0;
  std::uint64_t frames_released = 0;
  /// Forward master -> mirror value messages per layer (index = layer).
  std::vector<std::uint64_t> forward_value_syncs;
  std::vector<std::uint64_t> backward_value_syncs;

  void merge(const EngineCounters& o);
};

/// Parameter-gradient contribution keyed for deterministic reduction.
struct GradContribution {
  part_id partition = 0;
  int layer = 0;
  std::size_t param = 0;
  ExactTensor grad;
};

/// Sums contributions per parameter in (partition, layer, param) order.
ParameterSet reduce_params(const ParameterSet& layout, std::vector<GradContribution> contributions);

/// Frames and worker state for one GraphView task across all partitions.
class Execution {
 public:
  Execution(const Graph& g, const PartitionPlan& plan, const GraphView& view, Transport& transport,
            TaskScheduler* scheduler = nullptr);
  ~Execution();
  Execution(const Execution&) = delete;
  Execution& operator=(const Execution&) = delete;

  /// Layers must be run 1..K forward, then K..1 backward.
  void forward_layer(const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx);
  void backward_layer(const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx);

  /// Output rows of the last forwarded layer on partition p: the local
  /// masters with max_layer >= layer, ascending by global id.
  const std::vector<node_id>& output_nodes(part_id p) const;
  const Tensor& output(part_id p) const;
  /// Upstream gradient for output(p); rows aligned with output_nodes(p).
  void set_output_grad(part_id p, Tensor grad);

  /// Gradient w.r.t. the layer-1 inputs after backward_layer(1), rows aligned
  /// with input_nodes(p).
  const std::vector<node_id>& input_nodes(part_id p) const;
  const Tensor& input_grad(part_id p) const;

  /// Softmax weight per global edge id for an attention layer (NaN where the
  /// edge was not used). Instrumentation only.
  std::vector<real> attention_weights(int layer) const;

  std::vector<ExactTensor>& sinks(part_id p);
  /// Per-parameter sinks of every partition, tagged with the owning layer.
  std::vector<GradContribution> contributions(const std::vector<int>& layer_of_param) const;

  EngineCounters counters() const;
  void release_all();
  /// Also compute gradients w.r.t. the layer-1 inputs (off by default).
  void set_input_grad(bool on) { input_grad_ = on; }

 private:
  struct EdgeBatch;
  struct LayerFrame;
  struct PartState;

  template <typename Fn>
  void each_partition(Fn&& fn);
  void prepare_sinks(const ParameterSet& params);
  /// Barrier: moves every pending message into its receiver's inbox.
  void deliver();

  // Forward phases; a barrier separates consecutive calls.
  void f_local(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx);
  void f_remote(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx);
  void f_attention_max(part_id p, const LayerProgram& prog);
  void f_attention_remote_sums(part_id p, const LayerProgram& prog);
  void f_finish(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx);
  // Backward phases.
  void b_local(part_id p, const LayerProgram& prog);
  void b_remote(part_id p, const LayerProgram& prog);
  void b_transform(part_id p, const LayerProgram& prog);

  void run_gather(part_id p, const LayerProgram& prog, const ParameterSet& params, const StageContext& ctx,
                  LayerFrame& f, EdgeBatch& batch);
  bool backward_gather(const LayerProgram& prog, LayerFrame& f, EdgeBatch& batch, const Tensor& grad_m,
                       const std::vector<real>& z, const std::vector<real>& dot);
  void release(PartState& ps, int layer);

  const Graph& g_;
  const PartitionPlan& plan_;
  const GraphView& view_;
  Transport& transport_;
  TaskScheduler* scheduler_;
  std::vector<std::unique_ptr<PartState>> parts_;
  int last_layer_ = 0;
  bool input_grad_ = false;
};

}  // namespace tgar
