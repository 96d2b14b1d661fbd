#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tgar/graph.hpp"

namespace tgar {

/// Master/mirror layout. Each edge lives in the partition that masters its
/// source; mirrors are the foreign destinations of owned edges and carry only
/// transient state while a task runs.
class PartitionPlan {
 public:
  PartitionPlan() = default;
  /// Derives edge ownership and mirrors from a node -> partition map.
  PartitionPlan(const Graph& g, std::size_t partition_count, std::vector<part_id> master_of);

  std::size_t partition_count() const { return partition_count_; }
  part_id master_of(node_id v) const { return master_of_[v]; }
  const std::vector<part_id>& master_map() const { return master_of_; }
  const std::vector<edge_id>& edges_of(part_id p) const { return edges_of_[p]; }
  const std::vector<node_id>& masters_of(part_id p) const { return masters_of_[p]; }
  const std::vector<node_id>& mirrors_of(part_id p) const { return mirrors_of_[p]; }
  /// Partitions holding a mirror of v, ascending.
  const std::vector<part_id>& mirror_hosts(node_id v) const { return mirror_hosts_[v]; }

  std::size_t master_count(part_id p) const { return masters_of_[p].size(); }
  std::size_t mirror_count(part_id p) const { return mirrors_of_[p].size(); }
  std::size_t local_count(part_id p) const { return master_count(p) + mirror_count(p); }

  /// Local index of v in p (masters first, then mirrors), or kInvalidNode.
  node_id local_id(part_id p, node_id v) const;
  node_id global_id(part_id p, node_id local) const;
  bool is_master(part_id p, node_id v) const { return master_of_[v] == p; }

 private:
  std::size_t partition_count_ = 0;
  std::vector<part_id> master_of_;
  std::vector<std::vector<edge_id>> edges_of_;
  std::vector<std::vector<node_id>> masters_of_;
  std::vector<std::vector<node_id>> mirrors_of_;
  std::vector<std::vector<part_id>> mirror_hosts_;
};

struct PartitionOptions {
  std::uint64_t seed = 0;
  /// Assign id ranges instead of a shuffled round-robin.
  bool contiguous = false;
};

/// Balanced master assignment: a seeded shuffle dealt round-robin, or
/// floor(v * P / N) in contiguous mode.
PartitionPlan partition_even(const Graph& g, std::size_t partitions, const PartitionOptions& options = {});

double replica_factor(const PartitionPlan& plan, bool placeholder_mode);

void write_plan(const PartitionPlan& plan, const std::filesystem::path& path);
PartitionPlan read_plan(const Graph& g, const std::filesystem::path& path);

struct ClusterAssignment {
  std::vector<std::uint32_t> cluster_of;
  std::size_t cluster_count = 0;
  std::vector<std::size_t> cluster_sizes;
  /// Non-fatal notes produced while loading (e.g. re-densified ids).
  std::vector<std::string> warnings;

  std::vector<node_id> members(std::uint32_t c) const;
};

/// Builds an assignment from arbitrary ids, renumbering them densely in
/// ascending order of the original id.
ClusterAssignment densify_clusters(const std::vector<std::uint64_t>& raw_ids);

/// Modularity of an assignment on the symmetrized weighted graph (A + A^T) / 2.
double modularity(const Graph& g, const std::vector<std::uint32_t>& cluster_of);

/// Single-level Louvain: repeated node sweeps in a seeded order, moving each
/// node to the neighboring community with the largest strictly positive gain.
ClusterAssignment cluster_louvain(const Graph& g, std::uint64_t seed);

ClusterAssignment load_clusters(const std::filesystem::path& path, std::size_t num_nodes);
void write_clusters(const ClusterAssignment& c, const std::filesystem::path& path);

}  // namespace tgar
