#pragma once

#include <cstdint>
#include <vector>

#include "tgar/graph.hpp"

namespace tgar {

struct ViewOptions {
  /// Number of layers K.
  int layers = 1;
  /// Per-node fan-in cap while expanding; 0 disables sampling. A single entry
  /// applies to every BFS level, otherwise entry d applies at depth d.
  std::vector<std::size_t> fanout;
  std::uint64_t seed = 0;
  /// Also expand along out-edges (only changes anything on directed graphs).
  bool undirected = false;
  /// When non-empty, BFS never enters nodes whose flag is 0.
  std::vector<std::uint8_t> allowed;
};

/// Logical K-hop subgraph over the global indices.
///
/// A node at BFS depth d (targets have depth 0) carries max_layer = K - d and
/// holds embeddings h^0 .. h^{max_layer}. Edge e is used at layer k when it was
/// kept during expansion and max_layer(dst(e)) >= k.
class GraphView {
 public:
  GraphView() = default;

  int layers() const { return layers_; }
  const std::vector<node_id>& targets() const { return targets_; }
  /// Every node in the view, ascending.
  const std::vector<node_id>& nodes() const { return nodes_; }
  std::size_t touched() const { return nodes_.size(); }

  bool contains(node_id v) const { return max_layer_[v] >= 0; }
  /// -1 when v is outside the view.
  int max_layer(node_id v) const { return max_layer_[v]; }
  bool edge_kept(edge_id e) const { return edge_kept_[e] != 0; }
  bool edge_used(const Graph& g, edge_id e, int layer) const {
    return edge_kept_[e] && max_layer_[g.dst(e)] >= layer;
  }
  /// Position of v in nodes(), or -1.
  std::int32_t local_of(node_id v) const { return local_of_[v]; }
  std::size_t kept_edge_count() const { return kept_edges_; }

 private:
  friend GraphView build_view(const Graph& g, const std::vector<node_id>& targets, const ViewOptions& options);

  int layers_ = 0;
  std::vector<node_id> targets_;
  std::vector<node_id> nodes_;
  std::vector<std::int16_t> max_layer_;
  std::vector<std::uint8_t> edge_kept_;
  std::vector<std::int32_t> local_of_;
  std::size_t kept_edges_ = 0;
};

/// Breadth-first expansion from `targets` over in-edges for K levels.
GraphView build_view(const Graph& g, const std::vector<node_id>& targets, const ViewOptions& options);

}  // namespace tgar
