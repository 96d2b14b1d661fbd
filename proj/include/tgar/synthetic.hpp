#pragma once

#include <cstdint>

#include "tgar/graph.hpp"

namespace tgar {

struct RandomGraphOptions {
  std::size_t nodes = 16;
  /// Directed edges drawn uniformly (self-loops and repeats allowed).
  std::size_t edges = 40;
  std::size_t feature_dim = 4;
  std::size_t edge_feature_dim = 0;
  /// Random positive weights in [0.5, 1.5) instead of 1.
  bool weighted = false;
  std::uint64_t seed = 0;
};

/// Directed multigraph with uniform features in [-1, 1).
Graph random_graph(const RandomGraphOptions& o);

struct CitationOptions {
  std::size_t nodes = 1000;
  std::size_t classes = 5;
  std::size_t feature_dim = 200;
  /// Average degree and the share of edges that stay inside a class.
  double avg_degree = 4;
  double homophily = 0.8;
  /// Active words per node; words are biased towards the node's class.
  std::size_t words = 12;
  std::size_t train_per_class = 20;
  std::size_t validation = 200;
  std::size_t test = 400;
  std::uint64_t seed = 0;
  bool operator==(const CitationOptions&) const = default;
};

/// Class-structured stochastic block graph with bag-of-words style binary
/// features, symmetrized, with a per-class train split.
DatasetBundle citation_like(const CitationOptions& o, const IngestOptions& ingest = {});

/// Two dense communities of `size` nodes joined by `bridges` random edges.
/// Nodes [0, size) form community 0. Every node is labeled with its community
/// and is in the train split.
DatasetBundle two_community(std::size_t size, double inner_p, std::size_t bridges, std::uint64_t seed);

}  // namespace tgar
