#include "tgar/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tgar {

namespace {

std::vector<std::size_t> sorted_order(std::span<const EdgeInput> edges) {
  std::vector<std::size_t> order(edges.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (edges[a].src != edges[b].src) return edges[a].src < edges[b].src;
    return edges[a].dst < edges[b].dst;
  });
  return order;
}

// Counting-sort construction over edges already in id order.
AdjacencyIndex build_one(std::size_t n, std::span<const EdgeInput> edges, bool outgoing) {
  AdjacencyIndex idx;
  idx.offsets.assign(n + 1, 0);
  for (const auto& e : edges) ++idx.offsets[(outgoing ? e.src : e.dst) + 1];
  for (std::size_t v = 0; v < n; ++v) idx.offsets[v + 1] += idx.offsets[v];
  idx.neighbors.resize(edges.size());
  idx.edge_ids.resize(edges.size());
  std::vector<edge_id> cursor(idx.offsets.begin(), idx.offsets.end() - 1);
  if (outgoing) {
    for (edge_id id = 0; id < edges.size(); ++id) {
      const auto pos = cursor[edges[id].src]++;
      idx.neighbors[pos] = edges[id].dst;
      idx.edge_ids[pos] = id;
    }
  } else {
    // Edges are sorted by src, so each in-list fills in ascending source order
    // and, within equal sources, ascending edge id.
    for (edge_id id = 0; id < edges.size(); ++id) {
      const auto pos = cursor[edges[id].dst]++;
      idx.neighbors[pos] = edges[id].src;
      idx.edge_ids[pos] = id;
    }
  }
  return idx;
}

void check_ids(std::size_t n, std::span<const EdgeInput> edges) {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const auto& e = edges[i];
    if (e.src >= n || e.dst >= n) {
      throw RangeError("edge " + std::to_string(i) + " (" + std::to_string(e.src) + " -> " + std::to_string(e.dst) +
                       ") references a node outside [0, " + std::to_string(n) + ")");
    }
    if (!std::isfinite(e.weight)) throw NumericError("edge " + std::to_string(i) + " has a non-finite weight");
  }
}

}  // namespace

std::pair<AdjacencyIndex, AdjacencyIndex> build_indices(std::size_t n, std::span<const EdgeInput> edges) {
  check_ids(n, edges);
  const auto order = sorted_order(edges);
  std::vector<EdgeInput> sorted;
  sorted.reserve(edges.size());
  for (auto i : order) sorted.push_back(edges[i]);
  return {build_one(n, sorted, true), build_one(n, sorted, false)};
}

Graph::Graph(std::size_t num_nodes, std::vector<EdgeInput> edges, Tensor node_features, Tensor edge_features)
    : num_nodes_(num_nodes), node_features_(std::move(node_features)) {
  check_ids(num_nodes, edges);
  if (node_features_.empty() && node_features_.rows() == 0) node_features_ = Tensor(num_nodes, 0);
  if (node_features_.rows() != num_nodes) {
    throw ShapeError("node feature matrix has " + std::to_string(node_features_.rows()) + " rows, expected " +
                     std::to_string(num_nodes));
  }
  node_features_.check_finite("node features");
  if (!edge_features.empty() && edge_features.rows() != edges.size()) {
    throw ShapeError("edge feature matrix has " + std::to_string(edge_features.rows()) + " rows, expected " +
                     std::to_string(edges.size()));
  }
  const auto order = sorted_order(edges);
  std::vector<EdgeInput> sorted;
  sorted.reserve(edges.size());
  for (auto i : order) sorted.push_back(edges[i]);
  if (!edge_features.empty()) {
    edge_features_ = Tensor(edges.size(), edge_features.cols());
    for (std::size_t k = 0; k < order.size(); ++k) {
      auto from = edge_features.row(order[k]);
      std::copy(from.begin(), from.end(), edge_features_.row(k).begin());
    }
    edge_features_.check_finite("edge features");
  }
  src_.reserve(sorted.size());
  dst_.reserve(sorted.size());
  weight_.reserve(sorted.size());
  for (const auto& e : sorted) {
    src_.push_back(e.src);
    dst_.push_back(e.dst);
    weight_.push_back(e.weight);
  }
  csr_ = build_one(num_nodes, sorted, true);
  csc_ = build_one(num_nodes, sorted, false);
}

std::span<const edge_id> Graph::out_edges(node_id v) const {
  return std::span<const edge_id>(csr_.edge_ids).subspan(csr_.offsets[v], out_degree(v));
}

std::span<const edge_id> Graph::in_edges(node_id v) const {
  return std::span<const edge_id>(csc_.edge_ids).subspan(csc_.offsets[v], in_degree(v));
}

std::vector<EdgeInput> Graph::edge_list() const {
  std::vector<EdgeInput> out;
  out.reserve(num_edges());
  for (edge_id e = 0; e < num_edges(); ++e) out.push_back({src_[e], dst_[e], weight_[e]});
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

bool skip_line(const std::string& line) {
  const auto pos = line.find_first_not_of(" \t\r");
  return pos == std::string::npos || line[pos] == '#';
}

std::uint64_t parse_uint(const std::string& tok, std::size_t line, const char* what) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
    throw ParseError(std::string("expected a non-negative integer ") + what + ", got '" + tok + "'", line);
  }
  try {
    return std::stoull(tok);
  } catch (const std::exception&) {
    throw ParseError(std::string(what) + " '" + tok + "' is out of range", line);
  }
}

real parse_real(const std::string& tok, std::size_t line, const char* what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    throw ParseError(std::string("expected a number for ") + what + ", got '" + tok + "'", line);
  }
  if (used != tok.size()) throw ParseError(std::string("trailing characters in ") + what + " '" + tok + "'", line);
  if (!std::isfinite(v)) throw ParseError(std::string("non-finite ") + what, line);
  return static_cast<real>(v);
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

struct RawEdges {
  std::vector<EdgeInput> edges;
  std::vector<std::vector<real>> features;
};

RawEdges read_edges(const std::filesystem::path& path, std::size_t n) {
  auto in = open_input(path);
  RawEdges raw;
  std::string line;
  std::size_t lineno = 0;
  std::size_t edge_dim = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    const auto f = split_fields(line);
    if (f.size() < 2) throw ParseError("edge line needs at least src and dst", lineno);
    const auto s = parse_uint(f[0], lineno, "source id");
    const auto d = parse_uint(f[1], lineno, "destination id");
    if (s >= n || d >= n) {
      throw RangeError("edge " + f[0] + " -> " + f[1] + " references a node >= declared N=" + std::to_string(n) +
                       " (line " + std::to_string(lineno) + ")");
    }
    const real w = f.size() >= 3 ? parse_real(f[2], lineno, "edge weight") : real{1};
    const std::size_t dim = f.size() >= 3 ? f.size() - 3 : 0;
    if (first) {
      edge_dim = dim;
      first = false;
    } else if (dim != edge_dim) {
      throw ParseError("edge feature count " + std::to_string(dim) + " differs from earlier lines (" +
                       std::to_string(edge_dim) + ")",
                       lineno);
    }
    std::vector<real> feat;
    feat.reserve(dim);
    for (std::size_t k = 3; k < f.size(); ++k) feat.push_back(parse_real(f[k], lineno, "edge feature"));
    raw.edges.push_back({static_cast<node_id>(s), static_cast<node_id>(d), w});
    raw.features.push_back(std::move(feat));
  }
  return raw;
}

Tensor read_features(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  std::size_t lineno = 0;
  std::size_t n = 0, d = 0;
  bool header = false;
  Tensor out;
  std::vector<bool> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    const auto f = split_fields(line);
    if (!header) {
      if (f.size() != 2) throw ParseError("feature header must be 'N d_in'", lineno);
      n = parse_uint(f[0], lineno, "node count");
      d = parse_uint(f[1], lineno, "feature dimension");
      out = Tensor(n, d);
      seen.assign(n, false);
      header = true;
      continue;
    }
    if (f.size() != d + 1) {
      throw ParseError("feature row has " + std::to_string(f.size() ? f.size() - 1 : 0) + " values, expected " +
                           std::to_string(d),
                       lineno);
    }
    const auto v = parse_uint(f[0], lineno, "node id");
    if (v >= n) {
      throw RangeError("feature row for node " + f[0] + " exceeds declared N=" + std::to_string(n) + " (line " +
                       std::to_string(lineno) + ")");
    }
    if (seen[v]) throw DuplicateError("duplicate feature row for node " + f[0] + " (line " + std::to_string(lineno) + ")");
    seen[v] = true;
    for (std::size_t k = 0; k < d; ++k) out(v, k) = parse_real(f[k + 1], lineno, "feature value");
  }
  if (!header) throw ParseError("feature file is empty", 0);
  return out;
}

void read_labels(const std::filesystem::path& path, DatasetBundle& d) {
  auto in = open_input(path);
  const std::size_t n = d.graph.num_nodes();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    const auto f = split_fields(line);
    if (f.size() != 3) throw ParseError("label line must be 'node_id class_id split'", lineno);
    const auto v = parse_uint(f[0], lineno, "node id");
    if (v >= n) {
      throw RangeError("label for node " + f[0] + " exceeds N=" + std::to_string(n) + " (line " +
                       std::to_string(lineno) + ")");
    }
    const auto c = parse_uint(f[1], lineno, "class id");
    if (d.labels[v] >= 0) throw DuplicateError("duplicate label for node " + f[0] + " (line " + std::to_string(lineno) + ")");
    d.labels[v] = static_cast<int>(c);
    const auto& split = f[2];
    if (split == "train") {
      d.train.push_back(static_cast<node_id>(v));
    } else if (split == "val") {
      d.validation.push_back(static_cast<node_id>(v));
    } else if (split == "test") {
      d.test.push_back(static_cast<node_id>(v));
    } else {
      throw ParseError("unknown split '" + split + "' (expected train, val or test)", lineno);
    }
  }
}

void apply_policies(std::size_t n, std::vector<EdgeInput>& edges, std::vector<std::vector<real>>& feats,
                    const IngestOptions& opt) {
  if (opt.self_loops == SelfLoopPolicy::drop) {
    std::vector<EdgeInput> e2;
    std::vector<std::vector<real>> f2;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      if (edges[i].src == edges[i].dst) continue;
      e2.push_back(edges[i]);
      f2.push_back(std::move(feats[i]));
    }
    edges = std::move(e2);
    feats = std::move(f2);
  }
  if (opt.symmetrize) {
    const std::size_t m = edges.size();
    for (std::size_t i = 0; i < m; ++i) {
      if (edges[i].src == edges[i].dst) continue;
      edges.push_back({edges[i].dst, edges[i].src, edges[i].weight});
      feats.push_back(feats[i]);
    }
  }
  if (opt.self_loops == SelfLoopPolicy::add) {
    std::vector<bool> has(n, false);
    for (const auto& e : edges)
      if (e.src == e.dst) has[e.src] = true;
    const std::size_t dim = feats.empty() ? 0 : feats.front().size();
    for (node_id v = 0; v < n; ++v) {
      if (has[v]) continue;
      edges.push_back({v, v, 1});
      feats.emplace_back(dim, real{0});
    }
  }
}

Tensor to_tensor(const std::vector<std::vector<real>>& rows) {
  const std::size_t dim = rows.empty() ? 0 : rows.front().size();
  if (dim == 0) return {};
  Tensor t(rows.size(), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  return t;
}

void normalize_rows(Tensor& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    real s = 0;
    for (real v : x.row(r)) s += std::abs(v);
    if (s == 0) continue;
    for (real& v : x.row(r)) v /= s;
  }
}

void finish_splits(DatasetBundle& d) {
  for (auto* split : {&d.train, &d.validation, &d.test}) {
    std::sort(split->begin(), split->end());
    if (std::adjacent_find(split->begin(), split->end()) != split->end()) {
      throw DuplicateError("a node appears twice in the same split");
    }
  }
  std::vector<int> owner(d.graph.num_nodes(), -1);
  int which = 0;
  for (auto* split : {&d.train, &d.validation, &d.test}) {
    for (auto v : *split) {
      if (v >= d.graph.num_nodes()) throw RangeError("split node " + std::to_string(v) + " out of range");
      if (owner[v] >= 0) throw DuplicateError("node " + std::to_string(v) + " is in more than one split");
      if (d.labels[v] < 0) throw Error("split node " + std::to_string(v) + " has no label");
      owner[v] = which;
    }
    ++which;
  }
  int max_class = -1;
  for (int c : d.labels) max_class = std::max(max_class, c);
  d.class_count = static_cast<std::size_t>(max_class + 1);
}

}  // namespace

DatasetBundle load_dataset(const std::filesystem::path& edge_path, const std::filesystem::path& feature_path,
                           const std::filesystem::path& label_path, const IngestOptions& options) {
  Tensor features = read_features(feature_path);
  const std::size_t n = features.rows();
  auto raw = read_edges(edge_path, n);
  apply_policies(n, raw.edges, raw.features, options);
  if (options.normalize_features) normalize_rows(features);
  DatasetBundle d;
  d.graph = Graph(n, std::move(raw.edges), std::move(features), to_tensor(raw.features));
  d.labels.assign(n, -1);
  read_labels(label_path, d);
  finish_splits(d);
  return d;
}

DatasetBundle make_dataset(std::size_t n, std::vector<EdgeInput> edges, Tensor features, Tensor edge_features,
                           std::vector<int> labels, std::vector<node_id> train, std::vector<node_id> validation,
                           std::vector<node_id> test, const IngestOptions& options) {
  std::vector<std::vector<real>> feats(edges.size());
  if (!edge_features.empty()) {
    if (edge_features.rows() != edges.size()) throw ShapeError("edge feature rows do not match edge count");
    for (std::size_t i = 0; i < edges.size(); ++i) {
      auto r = edge_features.row(i);
      feats[i].assign(r.begin(), r.end());
    }
  }
  apply_policies(n, edges, feats, options);
  if (options.normalize_features) normalize_rows(features);
  if (labels.size() != n) throw ShapeError("label vector length does not match node count");
  DatasetBundle d;
  d.graph = Graph(n, std::move(edges), std::move(features), to_tensor(feats));
  d.labels = std::move(labels);
  d.train = std::move(train);
  d.validation = std::move(validation);
  d.test = std::move(test);
  finish_splits(d);
  return d;
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  return out;
}

}  // namespace

void write_edge_file(const Graph& g, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (edge_id e = 0; e < g.num_edges(); ++e) {
    out << g.src(e) << '\t' << g.dst(e) << '\t' << g.weight(e);
    for (std::size_t k = 0; k < g.edge_feature_dim(); ++k) out << '\t' << g.edge_features()(e, k);
    out << '\n';
  }
}

void write_feature_file(const Graph& g, const std::filesystem::path& path) {
  auto out = open_output(path);
  const auto& x = g.node_features();
  out << g.num_nodes() << ' ' << x.cols() << '\n';
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    out << v;
    for (std::size_t k = 0; k < x.cols(); ++k) out << '\t' << x(v, k);
    out << '\n';
  }
}

void write_label_file(const DatasetBundle& d, const std::filesystem::path& path) {
  auto out = open_output(path);
  auto emit = [&](const std::vector<node_id>& nodes, const char* split) {
    for (auto v : nodes) out << v << '\t' << d.labels[v] << '\t' << split << '\n';
  };
  emit(d.train, "train");
  emit(d.validation, "val");
  emit(d.test, "test");
}

// ---------------------------------------------------------------------------
// GCN normalization

GcnWeights gcn_weights(const Graph& g, GcnNorm norm, bool add_self_loops) {
  const std::size_t n = g.num_nodes();
  const bool loops = add_self_loops || norm == GcnNorm::renormalized;
  std::vector<real> degree(n, loops ? real{1} : real{0});
  std::vector<real> self(n, loops ? real{1} : real{0});
  for (edge_id e = 0; e < g.num_edges(); ++e) {
    degree[g.dst(e)] += g.weight(e);
    if (g.src(e) == g.dst(e)) self[g.dst(e)] += g.weight(e);
  }
  std::vector<real> inv_sqrt(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    if (degree[v] != 0) inv_sqrt[v] = 1 / std::sqrt(degree[v]);
  }
  const real sign = norm == GcnNorm::laplacian ? real{-1} : real{1};
  GcnWeights w;
  w.edge.resize(g.num_edges());
  for (edge_id e = 0; e < g.num_edges(); ++e) {
    const node_id i = g.dst(e), j = g.src(e);
    w.edge[e] = i == j ? real{0} : sign * g.weight(e) * inv_sqrt[i] * inv_sqrt[j];
  }
  w.diag.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    const real normalized = self[v] * inv_sqrt[v] * inv_sqrt[v];
    w.diag[v] = norm == GcnNorm::laplacian ? 1 - normalized : normalized;
  }
  return w;
}

real gcn_edge_weight(const Graph& g, node_id src, node_id dst, bool add_self_loops) {
  if (src >= g.num_nodes() || dst >= g.num_nodes()) throw RangeError("node id out of range");
  bool found = false;
  for (auto e : g.out_edges(src)) {
    if (g.dst(e) == dst) {
      found = true;
      break;
    }
  }
  if (!found) throw RangeError("no edge " + std::to_string(src) + " -> " + std::to_string(dst));
  const auto w = gcn_weights(g, GcnNorm::laplacian, add_self_loops);
  if (src == dst) return w.diag[dst];
  real total = 0;
  for (auto e : g.out_edges(src))
    if (g.dst(e) == dst) total += w.edge[e];
  return total;
}

}  // namespace tgar
