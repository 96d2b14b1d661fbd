#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "tgar/tensor.hpp"

namespace tgar {

/// Named trainable tensors in a fixed order.
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }
  std::size_t index_of(const std::string& name) const;
  std::size_t add(std::string name, Tensor t);
  /// Same count, names and shapes.
  bool compatible(const ParameterSet& other) const;
  /// Zero tensors with this set's layout.
  ParameterSet zeros_like() const;
  bool operator==(const ParameterSet&) const = default;
};

struct ParameterVersion {
  std::uint64_t version = 0;
  ParameterSet params;
};

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const OptimizerConfig&) const = default;
};

/// One optimizer state shared by every update, whatever version produced the
/// gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}
  /// Returns `params` moved one step along `grads`.
  ParameterSet step(const ParameterSet& params, const ParameterSet& grads);
  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// Publishes immutable parameter snapshots under increasing version numbers.
/// Readers hold shared pointers, so a snapshot lives as long as anyone uses it.
class ParameterManager {
 public:
  ParameterManager(ParameterSet initial, OptimizerConfig optimizer, std::size_t retain = 8);

  std::shared_ptr<const ParameterVersion> latest() const;
  /// Throws RangeError if `version` was never published or has been evicted.
  std::shared_ptr<const ParameterVersion> get(std::uint64_t version) const;
  /// Applies the optimizer to the latest snapshot and publishes the result.
  std::shared_ptr<const ParameterVersion> update(const ParameterSet& grads);
  /// Publishes `params` directly (checkpoint restore).
  std::shared_ptr<const ParameterVersion> publish(ParameterSet params);
  std::uint64_t latest_version() const;

 private:
  void store(std::shared_ptr<const ParameterVersion> v);

  mutable std::mutex mu_;
  std::mutex update_mu_;
  Optimizer optimizer_;
  std::size_t retain_;
  std::vector<std::shared_ptr<const ParameterVersion>> recent_;
  std::vector<std::pair<std::uint64_t, std::weak_ptr<const ParameterVersion>>> older_;
};

struct Checkpoint {
  std::uint64_t spec_hash = 0;
  std::uint64_t version = 0;
  std::uint64_t step = 0;
  ParameterSet params;
};

/// Text header followed by little-endian f64 payloads in header order.
void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view text);

}  // namespace tgar
