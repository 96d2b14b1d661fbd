#include "tgar/graph_view.hpp"

#include <algorithm>
#include <random>

namespace tgar {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

GraphView build_view(const Graph& g, const std::vector<node_id>& targets, const ViewOptions& options) {
  if (options.layers < 1) throw ConfigError("a view needs at least one layer");
  const std::size_t n = g.num_nodes();
  if (!options.allowed.empty() && options.allowed.size() != n) {
    throw ShapeError("allowed-node mask length does not match node count");
  }
  GraphView view;
  view.layers_ = options.layers;
  view.targets_ = targets;
  std::sort(view.targets_.begin(), view.targets_.end());
  view.targets_.erase(std::unique(view.targets_.begin(), view.targets_.end()), view.targets_.end());
  view.max_layer_.assign(n, -1);
  view.edge_kept_.assign(g.num_edges(), 0);

  std::vector<node_id> frontier;
  for (auto v : view.targets_) {
    if (v >= n) throw RangeError("target node " + std::to_string(v) + " out of range");
    view.max_layer_[v] = static_cast<std::int16_t>(options.layers);
    frontier.push_back(v);
  }
  auto allowed = [&](node_id v) { return options.allowed.empty() || options.allowed[v] != 0; };

  std::vector<edge_id> candidates;
  for (int depth = 0; depth < options.layers; ++depth) {
    const std::size_t cap =
        options.fanout.empty() ? 0 : options.fanout[std::min<std::size_t>(depth, options.fanout.size() - 1)];
    const auto next_layer = static_cast<std::int16_t>(options.layers - depth - 1);
    std::vector<node_id> next;
    for (auto v : frontier) {
      candidates.clear();
      for (auto e : g.in_edges(v))
        if (allowed(g.src(e))) candidates.push_back(e);
      if (cap > 0 && candidates.size() > cap) {
        std::mt19937_64 rng(mix(options.seed ^ mix(v)));
        std::vector<edge_id> chosen;
        std::sample(candidates.begin(), candidates.end(), std::back_inserter(chosen), cap, rng);
        candidates.swap(chosen);
      }
      for (auto e : candidates) {
        view.edge_kept_[e] = 1;
        const node_id u = g.src(e);
        if (view.max_layer_[u] < 0) {
          view.max_layer_[u] = next_layer;
          next.push_back(u);
        }
      }
      if (options.undirected) {
        for (auto e : g.out_edges(v)) {
          const node_id u = g.dst(e);
          if (allowed(u) && view.max_layer_[u] < 0) {
            view.max_layer_[u] = next_layer;
            next.push_back(u);
          }
        }
      }
    }
    std::sort(next.begin(), next.end());
    frontier.swap(next);
  }

  view.local_of_.assign(n, -1);
  for (node_id v = 0; v < n; ++v) {
    if (view.max_layer_[v] >= 0) {
      view.local_of_[v] = static_cast<std::int32_t>(view.nodes_.size());
      view.nodes_.push_back(v);
    }
  }
  view.kept_edges_ = static_cast<std::size_t>(std::count(view.edge_kept_.begin(), view.edge_kept_.end(), 1));
  return view;
}

}  // namespace tgar
