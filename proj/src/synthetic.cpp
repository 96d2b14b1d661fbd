#include "tgar/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace tgar {

namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(unit(rng) * static_cast<double>(n)); }

}  // namespace

Graph random_graph(const RandomGraphOptions& o) {
  if (o.nodes == 0) throw RangeError("random graph needs at least one node");
  std::mt19937_64 rng(o.seed * 0x9e3779b97f4a7c15ULL + 17);
  std::vector<EdgeInput> edges;
  edges.reserve(o.edges);
  for (std::size_t i = 0; i < o.edges; ++i) {
    EdgeInput e;
    e.src = static_cast<node_id>(below(rng, o.nodes));
    e.dst = static_cast<node_id>(below(rng, o.nodes));
    e.weight = o.weighted ? static_cast<real>(0.5 + unit(rng)) : real{1};
    edges.push_back(e);
  }
  Tensor x(o.nodes, o.feature_dim);
  for (auto& v : x.values()) v = static_cast<real>(2 * unit(rng) - 1);
  Tensor ef;
  if (o.edge_feature_dim) {
    ef = Tensor(o.edges, o.edge_feature_dim);
    for (auto& v : ef.values()) v = static_cast<real>(2 * unit(rng) - 1);
  }
  return Graph(o.nodes, std::move(edges), std::move(x), std::move(ef));
}

DatasetBundle citation_like(const CitationOptions& o, const IngestOptions& ingest) {
  if (o.classes < 2 || o.nodes < o.classes) throw RangeError("citation graph needs >= 2 classes and enough nodes");
  if (o.train_per_class * o.classes + o.validation + o.test > o.nodes) {
    throw RangeError("splits exceed the node count");
  }
  std::mt19937_64 rng(o.seed * 0x9e3779b97f4a7c15ULL + 101);
  std::vector<int> labels(o.nodes);
  for (std::size_t v = 0; v < o.nodes; ++v) labels[v] = static_cast<int>(v % o.classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::vector<node_id>> by_class(o.classes);
  for (node_id v = 0; v < o.nodes; ++v) by_class[static_cast<std::size_t>(labels[v])].push_back(v);

  std::vector<EdgeInput> edges;
  const auto m = static_cast<std::size_t>(o.avg_degree * static_cast<double>(o.nodes) / 2);
  for (std::size_t i = 0; i < m; ++i) {
    const auto u = static_cast<node_id>(below(rng, o.nodes));
    node_id v = 0;
    if (unit(rng) < o.homophily) {
      const auto& same = by_class[static_cast<std::size_t>(labels[u])];
      v = same[below(rng, same.size())];
    } else {
      v = static_cast<node_id>(below(rng, o.nodes));
    }
    if (u == v) continue;
    edges.push_back({u, v, 1});
    edges.push_back({v, u, 1});
  }

  // Each class prefers its own slice of the vocabulary.
  Tensor x(o.nodes, o.feature_dim);
  const std::size_t slice = std::max<std::size_t>(1, o.feature_dim / o.classes);
  for (std::size_t v = 0; v < o.nodes; ++v) {
    const auto c = static_cast<std::size_t>(labels[v]);
    for (std::size_t w = 0; w < o.words; ++w) {
      std::size_t col = 0;
      if (unit(rng) < 0.6) {
        col = std::min(o.feature_dim - 1, c * slice + below(rng, slice));
      } else {
        col = below(rng, o.feature_dim);
      }
      x(v, col) = 1;
    }
  }

  std::vector<node_id> train, val, test;
  std::vector<std::uint8_t> used(o.nodes, 0);
  for (const auto& members : by_class) {
    for (std::size_t i = 0; i < o.train_per_class; ++i) {
      train.push_back(members[i]);
      used[members[i]] = 1;
    }
  }
  std::vector<node_id> rest;
  for (node_id v = 0; v < o.nodes; ++v)
    if (!used[v]) rest.push_back(v);
  std::shuffle(rest.begin(), rest.end(), rng);
  val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(o.validation));
  test.assign(rest.begin() + static_cast<std::ptrdiff_t>(o.validation),
              rest.begin() + static_cast<std::ptrdiff_t>(o.validation + o.test));
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
  return make_dataset(o.nodes, std::move(edges), std::move(x), {}, std::move(labels), std::move(train),
                      std::move(val), std::move(test), ingest);
}

DatasetBundle two_community(std::size_t size, double inner_p, std::size_t bridges, std::uint64_t seed) {
  if (size < 2) throw RangeError("communities need at least two nodes");
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 7);
  const std::size_t n = 2 * size;
  std::vector<EdgeInput> edges;
  for (std::size_t c = 0; c < 2; ++c) {
    const std::size_t base = c * size;
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = i + 1; j < size; ++j) {
        if (unit(rng) >= inner_p) continue;
        const auto a = static_cast<node_id>(base + i), b = static_cast<node_id>(base + j);
        edges.push_back({a, b, 1});
        edges.push_back({b, a, 1});
      }
  }
  for (std::size_t i = 0; i < bridges; ++i) {
    const auto a = static_cast<node_id>(below(rng, size));
    const auto b = static_cast<node_id>(size + below(rng, size));
    edges.push_back({a, b, 1});
    edges.push_back({b, a, 1});
  }
  Tensor x(n, 2);
  std::vector<int> labels(n);
  for (std::size_t v = 0; v < n; ++v) {
    labels[v] = v < size ? 0 : 1;
    x(v, static_cast<std::size_t>(labels[v])) = 1;
  }
  std::vector<node_id> train(n);
  std::iota(train.begin(), train.end(), node_id{0});
  return make_dataset(n, std::move(edges), std::move(x), {}, std::move(labels), std::move(train), {}, {});
}

}  // namespace tgar
