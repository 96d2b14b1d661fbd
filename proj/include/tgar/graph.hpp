#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tgar/tensor.hpp"
#include "tgar/types.hpp"

namespace tgar {

struct EdgeInput {
  node_id src = 0;
  node_id dst = 0;
  real weight = 1;
};

/// Compressed adjacency over one direction. For the CSR index, `neighbors`
/// holds destinations of out-edges; for the CSC index, sources of in-edges.
struct AdjacencyIndex {
  std::vector<edge_id> offsets;
  std::vector<node_id> neighbors;
  std::vector<edge_id> edge_ids;

  bool operator==(const AdjacencyIndex&) const = default;
};

/// Builds (csr, csc) for `n` nodes. Edge ids are positions after a stable sort
/// by (src, dst), so any permutation of the same multiset yields identical
/// indices. Neighbor lists are ascending by neighbor id, ties by edge id.
std::pair<AdjacencyIndex, AdjacencyIndex> build_indices(std::size_t n, std::span<const EdgeInput> edges);

/// Immutable attributed graph. Edge ids are assigned by stable (src, dst)
/// order of the input.
class Graph {
 public:
  Graph() = default;
  Graph(std::size_t num_nodes, std::vector<EdgeInput> edges, Tensor node_features = {}, Tensor edge_features = {});

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t num_edges() const { return src_.size(); }
  node_id src(edge_id e) const { return src_[e]; }
  node_id dst(edge_id e) const { return dst_[e]; }
  real weight(edge_id e) const { return weight_[e]; }
  std::span<const real> weights() const { return weight_; }

  const AdjacencyIndex& csr() const { return csr_; }
  const AdjacencyIndex& csc() const { return csc_; }
  std::span<const edge_id> out_edges(node_id v) const;
  std::span<const edge_id> in_edges(node_id v) const;
  std::size_t out_degree(node_id v) const { return csr_.offsets[v + 1] - csr_.offsets[v]; }
  std::size_t in_degree(node_id v) const { return csc_.offsets[v + 1] - csc_.offsets[v]; }

  const Tensor& node_features() const { return node_features_; }
  const Tensor& edge_features() const { return edge_features_; }
  std::size_t feature_dim() const { return node_features_.cols(); }
  std::size_t edge_feature_dim() const { return edge_features_.cols(); }

  /// Edges as (src, dst, weight) in edge-id order.
  std::vector<EdgeInput> edge_list() const;

 private:
  std::size_t num_nodes_ = 0;
  std::vector<node_id> src_;
  std::vector<node_id> dst_;
  std::vector<real> weight_;
  AdjacencyIndex csr_;
  AdjacencyIndex csc_;
  Tensor node_features_;
  Tensor edge_features_;
};

enum class SelfLoopPolicy { keep, drop, add };

struct IngestOptions {
  bool symmetrize = false;
  SelfLoopPolicy self_loops = SelfLoopPolicy::keep;
  /// Scale every feature row to unit L1 norm (rows summing to zero are left alone).
  bool normalize_features = false;
  bool operator==(const IngestOptions&) const = default;
};

struct DatasetBundle {
  Graph graph;
  /// Class id per node, -1 when unlabeled.
  std::vector<int> labels;
  std::vector<node_id> train;
  std::vector<node_id> validation;
  std::vector<node_id> test;
  std::size_t class_count = 0;
};

DatasetBundle load_dataset(const std::filesystem::path& edge_path, const std::filesystem::path& feature_path,
                           const std::filesystem::path& label_path, const IngestOptions& options = {});

/// Builds a bundle from in-memory parts, applying the same edge policies as
/// load_dataset. Labels of -1 are unlabeled; splits must be disjoint.
DatasetBundle make_dataset(std::size_t n, std::vector<EdgeInput> edges, Tensor features, Tensor edge_features,
                           std::vector<int> labels, std::vector<node_id> train, std::vector<node_id> validation,
                           std::vector<node_id> test, const IngestOptions& options = {});

void write_edge_file(const Graph& g, const std::filesystem::path& path);
void write_feature_file(const Graph& g, const std::filesystem::path& path);
void write_label_file(const DatasetBundle& d, const std::filesystem::path& path);

enum class GcnNorm {
  /// L = I - D^{-1/2} A D^{-1/2}
  laplacian,
  /// D~^{-1/2} (A + I) D~^{-1/2}; always adds self-loops.
  renormalized,
};

/// Per-edge propagation coefficients plus the per-node diagonal term.
///
/// A(i, j) is the total weight of stored edges j -> i and d_i its row sum, so a
/// message along edge j -> i is scaled by edge[e]. Stored self-loops get
/// edge weight 0; the whole diagonal of the operator lives in diag[i].
struct GcnWeights {
  std::vector<real> edge;
  std::vector<real> diag;
};

GcnWeights gcn_weights(const Graph& g, GcnNorm norm, bool add_self_loops);

/// Laplacian entry for the stored edge src -> dst, i.e. L(dst, src), or
/// L(i, i) when src == dst. Throws RangeError if no such edge exists.
real gcn_edge_weight(const Graph& g, node_id src, node_id dst, bool add_self_loops = false);

}  // namespace tgar
