#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tgar/models.hpp"
#include "tgar/oracle.hpp"
#include "tgar/synthetic.hpp"
#include "tgar/trainer.hpp"

namespace tgar {

struct CheckResult {
  std::string name;
  bool pass = false;
  /// Measured error (or 0/1 for exact checks) and the bound it must stay under.
  double value = 0;
  double tolerance = 0;
  std::string detail;
};

/// Random labeled dataset on top of random_graph; every node is a train node.
DatasetBundle random_dataset(const RandomGraphOptions& o, std::size_t classes);

/// Full-batch loss, parameter gradients and input gradients through the
/// engine on P partitions.
struct EngineProbe {
  double loss = 0;
  ParameterSet grads;
  Tensor input_grad;
};
EngineProbe probe_engine(const DatasetBundle& d, const ModelSpec& spec, const ParameterSet& params,
                         std::size_t partitions, std::uint64_t partition_seed = 0);

/// Same loss with replaced node features (for finite differences in X).
double engine_loss(const DatasetBundle& d, const ModelSpec& spec, const ParameterSet& params, const Tensor& features,
                   std::size_t partitions);

/// Largest |engine - dense| over all nodes of an identity-decoder GCN
/// forward on `g` (no dropout, P partitions).
double engine_vs_dense(const Graph& g, const ModelSpec& spec, const ParameterSet& params, std::size_t partitions);

/// Central finite differences of the engine loss w.r.t. every parameter and
/// the node features; returns the largest norm-wise relative error.
CheckResult engine_gradcheck(const std::string& name, const DatasetBundle& d, const ModelSpec& spec,
                             std::uint64_t seed, double tol, bool flip_analytic = false);

/// The check list behind `tgar gradcheck`. A non-empty `inject_fault` names
/// one check whose analytic side is deliberately corrupted.
std::vector<CheckResult> gradcheck_suite(std::uint64_t seed, const std::string& inject_fault = {});
std::vector<std::string> gradcheck_names();

}  // namespace tgar
