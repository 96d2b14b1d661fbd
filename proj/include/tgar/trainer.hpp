#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "tgar/engine.hpp"
#include "tgar/graph_view.hpp"
#include "tgar/models.hpp"
#include "tgar/parameters.hpp"
#include "tgar/partition.hpp"
#include "tgar/scheduler.hpp"

namespace tgar {

enum class Strategy { global, mini, cluster };
enum class UpdateMode { sync, async };

std::string to_string(Strategy s);
std::string to_string(UpdateMode m);
std::string to_string(OptimizerKind k);
Strategy parse_strategy(const std::string& s);
UpdateMode parse_update_mode(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainingConfig {
  Strategy strategy = Strategy::global;
  std::size_t partitions = 1;
  /// Clusters per batch (cluster strategy).
  std::size_t gamma = 1;
  /// Share of labeled train nodes per batch (mini strategy).
  double batch_fraction = 0.01;
  /// Steps; for the global strategy one step is one epoch.
  std::size_t steps = 200;
  OptimizerConfig optimizer;
  UpdateMode mode = UpdateMode::sync;
  /// Async tasks started from the same snapshot before their updates land.
  std::size_t in_flight = 2;
  /// Per-node fan-in caps by BFS depth; empty disables sampling.
  std::vector<std::size_t> fanout;
  std::uint64_t seed = 0;
  bool deterministic = true;
  /// Partition workers inside one task.
  std::size_t workers = 1;
  /// Stop after this many evaluations without validation improvement; 0 = off.
  std::size_t patience = 50;
  /// Cluster batches include their K-hop boundary outside the chosen clusters.
  bool cluster_boundary = true;
  bool undirected = false;

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

struct Batch {
  std::vector<node_id> targets;
  /// Chosen clusters (cluster strategy only).
  std::vector<std::uint32_t> clusters;
};

/// Targets for step `step`. Sampling is without replacement within a step and
/// independent across steps. Cluster batches draw from clusters that contain at
/// least one train node.
Batch select_batch(Strategy strategy, const std::vector<node_id>& train, const ClusterAssignment* clusters,
                   std::size_t gamma, double fraction, std::uint64_t step, std::uint64_t seed);

struct StepResult {
  double loss = 0;
  double data_loss = 0;
  double penalty = 0;
  ParameterSet grads;
  std::size_t targets = 0;
  std::size_t correct = 0;
  std::size_t touched = 0;
  std::uint64_t messages = 0;
  std::uint64_t bytes = 0;
  EngineCounters counters;
  /// dLoss/dX per node (N x input width) when input gradients are enabled.
  Tensor input_grad;
};

struct Evaluation {
  /// Predicted class per node.
  std::vector<int> predicted;
  /// Data loss per node (0 where unlabeled).
  std::vector<real> node_loss;
  /// Mean data loss over the labeled nodes of each split.
  double train_loss = 0;
  double val_loss = 0;
  double test_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double test_acc = 0;
};

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels, const std::vector<node_id>& nodes);
/// Unweighted mean of per-class F1 over classes present in labels or predictions.
double macro_f1(const std::vector<int>& predicted, const std::vector<int>& labels, const std::vector<node_id>& nodes,
                std::size_t class_count);

struct FitOptions {
  std::filesystem::path metrics_path;
  /// Per-step engine instrumentation: step, messages, bytes, gather calls,
  /// frames allocated and released.
  std::filesystem::path counters_path;
  std::filesystem::path best_checkpoint;
  /// Written when a stop request interrupts training.
  std::filesystem::path last_checkpoint;
  const std::atomic<bool>* stop = nullptr;
};

struct FitResult {
  std::size_t steps_run = 0;
  bool interrupted = false;
  bool early_stopped = false;
  std::size_t best_step = 0;
  ParameterSet best_params;
  Evaluation best;
  std::vector<double> losses;
  std::size_t max_staleness = 0;
  double mean_staleness = 0;
};

class Trainer {
 public:
  Trainer(const DatasetBundle& data, const Model& model, const PartitionPlan& plan, TrainingConfig config,
          const ClusterAssignment* clusters = nullptr);
  ~Trainer();

  const TrainingConfig& config() const { return config_; }
  /// Also report gradients w.r.t. the node features from train_step.
  void set_input_grad(bool on) { input_grad_ = on; }
  Batch batch(std::uint64_t step) const;
  GraphView view_for(const Batch& batch, std::uint64_t step) const;

  /// Forward, loss and backward on one view. Never modifies `params`.
  StepResult train_step(const GraphView& view, const ParameterSet& params, std::uint64_t step);
  /// Inference on the whole graph without dropout.
  Evaluation evaluate(const ParameterSet& params);

  /// Runs config().steps steps with the configured update mode, evaluating
  /// after every update and keeping the best-validation parameters.
  FitResult fit(ParameterManager& manager, const FitOptions& options = {});

 private:
  StepResult run_task(const GraphView& view, const ParameterSet& params, std::uint64_t step, bool training,
                      TaskScheduler* scheduler, Evaluation* eval);

  const DatasetBundle& data_;
  const Model& model_;
  const PartitionPlan& plan_;
  TrainingConfig config_;
  const ClusterAssignment* clusters_;
  std::unique_ptr<TaskScheduler> scheduler_;
  bool input_grad_ = false;
};

}  // namespace tgar
