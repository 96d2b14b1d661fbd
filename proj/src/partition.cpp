#include "tgar/partition.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace tgar {

PartitionPlan::PartitionPlan(const Graph& g, std::size_t partition_count, std::vector<part_id> master_of)
    : partition_count_(partition_count), master_of_(std::move(master_of)) {
  const std::size_t n = g.num_nodes();
  if (master_of_.size() != n) throw ShapeError("partition map length does not match node count");
  if (partition_count_ == 0) throw RangeError("partition count must be positive");
  edges_of_.assign(partition_count_, {});
  masters_of_.assign(partition_count_, {});
  mirrors_of_.assign(partition_count_, {});
  mirror_hosts_.assign(n, {});
  for (node_id v = 0; v < n; ++v) {
    if (master_of_[v] >= partition_count_) {
      throw RangeError("node " + std::to_string(v) + " assigned to partition " + std::to_string(master_of_[v]) +
                       " of " + std::to_string(partition_count_));
    }
    masters_of_[master_of_[v]].push_back(v);
  }
  for (edge_id e = 0; e < g.num_edges(); ++e) {
    const part_id p = master_of_[g.src(e)];
    edges_of_[p].push_back(e);
    const node_id d = g.dst(e);
    if (master_of_[d] != p) mirrors_of_[p].push_back(d);
  }
  for (part_id p = 0; p < partition_count_; ++p) {
    auto& m = mirrors_of_[p];
    std::sort(m.begin(), m.end());
    m.erase(std::unique(m.begin(), m.end()), m.end());
    for (auto v : m) mirror_hosts_[v].push_back(p);
  }
}

node_id PartitionPlan::local_id(part_id p, node_id v) const {
  const auto& ms = masters_of_[p];
  if (master_of_[v] == p) {
    return static_cast<node_id>(std::lower_bound(ms.begin(), ms.end(), v) - ms.begin());
  }
  const auto& mi = mirrors_of_[p];
  const auto it = std::lower_bound(mi.begin(), mi.end(), v);
  if (it == mi.end() || *it != v) return kInvalidNode;
  return static_cast<node_id>(ms.size() + (it - mi.begin()));
}

node_id PartitionPlan::global_id(part_id p, node_id local) const {
  const auto& ms = masters_of_[p];
  if (local < ms.size()) return ms[local];
  const auto k = local - ms.size();
  if (k >= mirrors_of_[p].size()) throw RangeError("local id " + std::to_string(local) + " out of range");
  return mirrors_of_[p][k];
}

PartitionPlan partition_even(const Graph& g, std::size_t partitions, const PartitionOptions& options) {
  const std::size_t n = g.num_nodes();
  if (partitions < 1 || partitions > n) {
    throw RangeError("partition count " + std::to_string(partitions) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<part_id> master(n);
  if (options.contiguous) {
    for (std::size_t v = 0; v < n; ++v) master[v] = static_cast<part_id>(v * partitions / n);
  } else {
    std::vector<node_id> order(n);
    std::iota(order.begin(), order.end(), node_id{0});
    std::mt19937_64 rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < n; ++k) master[order[k]] = static_cast<part_id>(k % partitions);
  }
  return PartitionPlan(g, partitions, std::move(master));
}

double replica_factor(const PartitionPlan& plan, bool placeholder_mode) {
  if (placeholder_mode) return 1.0;
  std::size_t masters = 0, mirrors = 0;
  for (part_id p = 0; p < plan.partition_count(); ++p) {
    masters += plan.master_count(p);
    mirrors += plan.mirror_count(p);
  }
  return static_cast<double>(masters + mirrors) / static_cast<double>(masters);
}

void write_plan(const PartitionPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "P=" << plan.partition_count() << '\n';
  for (node_id v = 0; v < plan.master_map().size(); ++v) out << v << '\t' << plan.master_of(v) << '\n';
}

PartitionPlan read_plan(const Graph& g, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0, parts = 0;
  std::vector<part_id> master(g.num_nodes(), static_cast<part_id>(-1));
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("P=", 0) != 0) throw ParseError("plan file must start with 'P=<count>'", lineno);
      try {
        parts = std::stoull(line.substr(2));
      } catch (const std::exception&) {
        throw ParseError("bad partition count", lineno);
      }
      header = true;
      continue;
    }
    std::istringstream fields(line);
    std::uint64_t v = 0, p = 0;
    if (!(fields >> v >> p)) throw ParseError("plan line must be 'node_id partition_id'", lineno);
    if (v >= g.num_nodes()) throw RangeError("plan references node " + std::to_string(v));
    master[v] = static_cast<part_id>(p);
  }
  for (node_id v = 0; v < master.size(); ++v) {
    if (master[v] == static_cast<part_id>(-1)) throw Error("plan is missing node " + std::to_string(v));
  }
  return PartitionPlan(g, parts, std::move(master));
}

std::vector<node_id> ClusterAssignment::members(std::uint32_t c) const {
  std::vector<node_id> out;
  for (node_id v = 0; v < cluster_of.size(); ++v)
    if (cluster_of[v] == c) out.push_back(v);
  return out;
}

ClusterAssignment densify_clusters(const std::vector<std::uint64_t>& raw_ids) {
  std::map<std::uint64_t, std::uint32_t> remap;
  for (auto id : raw_ids) remap.emplace(id, 0);
  std::uint32_t next = 0;
  for (auto& [id, dense] : remap) dense = next++;
  ClusterAssignment out;
  out.cluster_count = remap.size();
  out.cluster_sizes.assign(out.cluster_count, 0);
  out.cluster_of.reserve(raw_ids.size());
  for (auto id : raw_ids) {
    const auto c = remap[id];
    out.cluster_of.push_back(c);
    ++out.cluster_sizes[c];
  }
  return out;
}

namespace {

struct SymmetricGraph {
  // Neighbor lists of B = (A + A^T) / 2 with merged parallel entries; a self
  // entry appears in the list of its own node.
  std::vector<std::vector<std::pair<node_id, double>>> adj;
  std::vector<double> strength;
  double total = 0;  // sum of all B entries, i.e. 2m
};

SymmetricGraph symmetrize(const Graph& g) {
  const std::size_t n = g.num_nodes();
  std::vector<std::map<node_id, double>> acc(n);
  for (edge_id e = 0; e < g.num_edges(); ++e) {
    const node_id s = g.src(e), d = g.dst(e);
    const double w = g.weight(e);
    if (s == d) {
      acc[s][s] += w;
    } else {
      acc[s][d] += w / 2;
      acc[d][s] += w / 2;
    }
  }
  SymmetricGraph sg;
  sg.adj.resize(n);
  sg.strength.assign(n, 0);
  for (node_id v = 0; v < n; ++v) {
    for (const auto& [u, w] : acc[v]) {
      sg.adj[v].emplace_back(u, w);
      sg.strength[v] += w;
    }
    sg.total += sg.strength[v];
  }
  return sg;
}

double modularity_of(const SymmetricGraph& sg, const std::vector<std::uint32_t>& c) {
  if (sg.total == 0) return 0;
  std::unordered_map<std::uint32_t, double> in, tot;
  for (node_id v = 0; v < sg.adj.size(); ++v) {
    tot[c[v]] += sg.strength[v];
    for (const auto& [u, w] : sg.adj[v])
      if (c[u] == c[v]) in[c[v]] += w;
  }
  double q = 0;
  for (const auto& [cid, t] : tot) {
    const double frac = t / sg.total;
    q += in[cid] / sg.total - frac * frac;
  }
  return q;
}

}  // namespace

double modularity(const Graph& g, const std::vector<std::uint32_t>& cluster_of) {
  if (cluster_of.size() != g.num_nodes()) throw ShapeError("cluster map length does not match node count");
  return modularity_of(symmetrize(g), cluster_of);
}

ClusterAssignment cluster_louvain(const Graph& g, std::uint64_t seed) {
  const std::size_t n = g.num_nodes();
  if (n == 0) throw Error("cannot cluster an empty graph");
  const auto sg = symmetrize(g);
  std::vector<std::uint32_t> comm(n);
  std::iota(comm.begin(), comm.end(), 0u);
  if (sg.total == 0) {
    return densify_clusters(std::vector<std::uint64_t>(comm.begin(), comm.end()));
  }
  std::vector<double> tot(sg.strength);
  std::vector<node_id> order(n);
  std::iota(order.begin(), order.end(), node_id{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double two_m = sg.total;
  constexpr double kMinGain = 1e-12;
  double q = modularity_of(sg, comm);
  std::unordered_map<std::uint32_t, double> links;
  bool moved = true;
  while (moved) {
    moved = false;
    for (node_id v : order) {
      const std::uint32_t own = comm[v];
      const double kv = sg.strength[v];
      links.clear();
      links[own] = 0;
      for (const auto& [u, w] : sg.adj[v])
        if (u != v) links[comm[u]] += w;
      tot[own] -= kv;
      auto score = [&](std::uint32_t c) { return links[c] - kv * tot[c] / two_m; };
      const double stay = score(own);
      std::uint32_t best = own;
      double best_score = stay;
      std::vector<std::uint32_t> candidates;
      candidates.reserve(links.size());
      for (const auto& kvp : links) candidates.push_back(kvp.first);
      std::sort(candidates.begin(), candidates.end());
      for (auto c : candidates) {
        if (c == own) continue;
        const double s = score(c);
        if (s > best_score + kMinGain) {
          best_score = s;
          best = c;
        }
      }
      tot[best] += kv;
      if (best != own) {
        comm[v] = best;
        moved = true;
      }
    }
    const double next = modularity_of(sg, comm);
    if (next < q - 1e-12) throw Error("internal error: Louvain sweep decreased modularity");
    q = next;
  }
  return densify_clusters(std::vector<std::uint64_t>(comm.begin(), comm.end()));
}

ClusterAssignment load_clusters(const std::filesystem::path& path, std::size_t num_nodes) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  constexpr auto kUnset = static_cast<std::uint64_t>(-1);
  std::vector<std::uint64_t> raw(num_nodes, kUnset);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto pos = line.find_first_not_of(" \t\r");
    if (pos == std::string::npos || line[pos] == '#') continue;
    std::istringstream fields(line);
    std::uint64_t v = 0, c = 0;
    std::string extra;
    if (!(fields >> v >> c) || (fields >> extra)) throw ParseError("cluster line must be 'node_id cluster_id'", lineno);
    if (v >= num_nodes) throw RangeError("cluster file references node " + std::to_string(v) + " (line " +
                                         std::to_string(lineno) + ")");
    if (raw[v] != kUnset) throw DuplicateError("node " + std::to_string(v) + " assigned twice (line " +
                                               std::to_string(lineno) + ")");
    raw[v] = c;
  }
  for (std::size_t v = 0; v < num_nodes; ++v) {
    if (raw[v] == kUnset) throw Error("cluster file is missing node " + std::to_string(v));
  }
  auto out = densify_clusters(raw);
  std::uint64_t max_id = 0;
  for (auto c : raw) max_id = std::max(max_id, c);
  if (max_id + 1 != out.cluster_count) {
    out.warnings.push_back("cluster ids were not dense; renumbered " + std::to_string(out.cluster_count) +
                           " clusters to [0, " + std::to_string(out.cluster_count) + ")");
  }
  return out;
}

void write_clusters(const ClusterAssignment& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (node_id v = 0; v < c.cluster_of.size(); ++v) out << v << '\t' << c.cluster_of[v] << '\n';
}

}  // namespace tgar
