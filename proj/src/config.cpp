#include "tgar/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace tgar {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

std::string self_loop_name(SelfLoopPolicy p) {
  switch (p) {
    case SelfLoopPolicy::keep: return "keep";
    case SelfLoopPolicy::drop: return "drop";
    case SelfLoopPolicy::add: return "add";
  }
  return "?";
}

SelfLoopPolicy parse_self_loops(const std::string& s) {
  if (s == "keep") return SelfLoopPolicy::keep;
  if (s == "drop") return SelfLoopPolicy::drop;
  if (s == "add") return SelfLoopPolicy::add;
  throw ConfigError("unknown self-loop policy '" + s + "'");
}

std::string layers_text(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ',';
    out += to_string(l.kind) + ':' + std::to_string(l.out_dim) + ':' + to_string(l.activation);
    if (l.bias) out += ":bias";
  }
  return out;
}

std::vector<LayerSpec> parse_layers(const std::string& s) {
  std::vector<LayerSpec> out;
  for (const auto& item : split(s, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() < 3 || parts.size() > 4 || (parts.size() == 4 && parts[3] != "bias")) {
      throw ConfigError("layer '" + item + "' should look like kind:width:activation[:bias]");
    }
    LayerSpec l;
    l.kind = parse_layer_kind(parts[0]);
    l.out_dim = to_u64(parts[1]);
    l.activation = parse_activation(parts[2]);
    l.bias = parts.size() == 4;
    out.push_back(l);
  }
  return out;
}

std::string list_text(const std::vector<std::size_t>& v) {
  std::string out;
  for (auto x : v) {
    if (!out.empty()) out += ',';
    out += std::to_string(x);
  }
  return out;
}

struct Entry {
  const char* section;
  const char* key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Entry size_entry(const char* sec, const char* key, T& field) {
  return {sec, key, [&field] { return std::to_string(field); },
          [&field](const std::string& v) { field = static_cast<T>(to_u64(v)); }};
}
Entry double_entry(const char* sec, const char* key, double& field) {
  return {sec, key, [&field] { return fmt(field); }, [&field](const std::string& v) { field = to_double(v); }};
}
Entry bool_entry(const char* sec, const char* key, bool& field) {
  return {sec, key, [&field] { return std::string(field ? "true" : "false"); },
          [&field](const std::string& v) { field = to_bool(v); }};
}
Entry path_entry(const char* sec, const char* key, std::filesystem::path& field) {
  return {sec, key, [&field] { return field.string(); }, [&field](const std::string& v) { field = v; }};
}
template <typename E>
Entry enum_entry(const char* sec, const char* key, E& field, std::string (*name)(E), E (*parse)(const std::string&)) {
  return {sec, key, [&field, name] { return name(field); }, [&field, parse](const std::string& v) { field = parse(v); }};
}

std::vector<Entry> registry(RunConfig& c) {
  auto& d = c.data;
  auto& s = d.citation;
  auto& m = c.model;
  auto& t = c.train;
  return {
      path_entry("data", "edges", d.edges),
      path_entry("data", "features", d.features),
      path_entry("data", "labels", d.labels),
      bool_entry("data", "symmetrize", d.ingest.symmetrize),
      enum_entry<SelfLoopPolicy>("data", "self_loops", d.ingest.self_loops, self_loop_name, parse_self_loops),
      bool_entry("data", "normalize_features", d.ingest.normalize_features),
      {"data", "synthetic", [&d] { return d.synthetic; },
       [&d](const std::string& v) {
         if (v != "none" && v != "citation") throw ConfigError("synthetic must be none or citation");
         d.synthetic = v;
       }},
      size_entry("data", "synthetic_nodes", s.nodes),
      size_entry("data", "synthetic_classes", s.classes),
      size_entry("data", "synthetic_features", s.feature_dim),
      double_entry("data", "synthetic_degree", s.avg_degree),
      double_entry("data", "synthetic_homophily", s.homophily),
      size_entry("data", "synthetic_words", s.words),
      size_entry("data", "synthetic_train_per_class", s.train_per_class),
      size_entry("data", "synthetic_validation", s.validation),
      size_entry("data", "synthetic_test", s.test),
      size_entry("data", "synthetic_seed", s.seed),

      size_entry("model", "input_dim", m.input_dim),
      size_entry("model", "class_count", m.class_count),
      {"model", "layers", [&m] { return layers_text(m.layers); },
       [&m](const std::string& v) { m.layers = parse_layers(v); }},
      double_entry("model", "keep_prob", m.keep_prob),
      enum_entry<DecoderKind>("model", "decoder", m.decoder, to_string, parse_decoder),
      bool_entry("model", "decoder_zero_init", m.decoder_zero_init),
      double_entry("model", "l2", m.l2),
      enum_entry<RegScope>("model", "reg_scope", m.reg_scope, to_string, parse_reg_scope),
      enum_entry<GcnNorm>("model", "norm", m.norm, to_string, parse_norm),
      bool_entry("model", "add_self_loops", m.add_self_loops),
      size_entry("model", "edge_proj_dim", m.edge_proj_dim),

      enum_entry<Strategy>("train", "strategy", t.strategy, to_string, parse_strategy),
      size_entry("train", "partitions", t.partitions),
      size_entry("train", "gamma", t.gamma),
      double_entry("train", "batch_fraction", t.batch_fraction),
      size_entry("train", "steps", t.steps),
      enum_entry<OptimizerKind>("train", "optimizer", t.optimizer.kind, to_string, parse_optimizer),
      double_entry("train", "lr", t.optimizer.lr),
      double_entry("train", "beta1", t.optimizer.beta1),
      double_entry("train", "beta2", t.optimizer.beta2),
      double_entry("train", "eps", t.optimizer.eps),
      enum_entry<UpdateMode>("train", "mode", t.mode, to_string, parse_update_mode),
      size_entry("train", "in_flight", t.in_flight),
      {"train", "fanout", [&t] { return list_text(t.fanout); },
       [&t](const std::string& v) {
         t.fanout.clear();
         for (const auto& x : split(v, ',')) t.fanout.push_back(to_u64(x));
       }},
      size_entry("train", "patience", t.patience),
      size_entry("train", "workers", t.workers),
      bool_entry("train", "cluster_boundary", t.cluster_boundary),
      bool_entry("train", "undirected", t.undirected),

      size_entry("run", "seed", t.seed),
      bool_entry("run", "deterministic", t.deterministic),
      path_entry("run", "out_dir", c.out_dir),
      path_entry("run", "clusters_file", c.clusters_file),
      size_entry("run", "partition_seed", c.partition_seed),
      bool_entry("run", "contiguous_partitions", c.contiguous_partitions),
      size_entry("run", "louvain_seed", c.louvain_seed),
  };
}

}  // namespace

std::string RunConfig::serialize() const {
  auto copy = *this;
  const auto entries = registry(copy);
  std::string out;
  std::string section;
  for (const auto& e : entries) {
    if (section != e.section) {
      if (!section.empty()) out += '\n';
      section = e.section;
      out += '[' + section + "]\n";
    }
    out += std::string(e.key) + " = " + e.get() + '\n';
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  const auto entries = registry(c);
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto s = trim(line);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      if (section != "data" && section != "model" && section != "train" && section != "run") {
        throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const auto key = trim(std::string_view(s).substr(0, eq));
    const auto value = trim(std::string_view(s).substr(eq + 1));
    bool found = false;
    for (const auto& e : entries) {
      if (section != e.section || key != e.key) continue;
      try {
        e.set(value);
      } catch (const Error& err) {
        throw ConfigError("line " + std::to_string(lineno) + ": " + key + ": " + err.what());
      }
      found = true;
      break;
    }
    if (!found) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "' in [" + section + "]");
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto c = parse_config(buf.str());
  const auto base = path.parent_path();
  for (auto* p : {&c.data.edges, &c.data.features, &c.data.labels, &c.clusters_file}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return c;
}

void apply_environment(RunConfig& c) {
  if (const char* s = std::getenv("GT_SEED")) {
    try {
      c.train.seed = to_u64(s);
    } catch (const ConfigError&) {
      throw ConfigError(std::string("GT_SEED must be a non-negative integer, got '") + s + "'");
    }
  }
}

DatasetBundle load_run_data(const RunConfig& c) {
  if (c.data.synthetic == "citation") return citation_like(c.data.citation, c.data.ingest);
  if (c.data.edges.empty() || c.data.features.empty() || c.data.labels.empty()) {
    throw ConfigError("[data] needs edges, features and labels paths (or synthetic = citation)");
  }
  return load_dataset(c.data.edges, c.data.features, c.data.labels, c.data.ingest);
}

ModelSpec resolve_model(const RunConfig& c, const DatasetBundle& d) {
  ModelSpec m = c.model;
  if (m.input_dim == 0) m.input_dim = d.graph.feature_dim();
  if (m.class_count == 0) m.class_count = d.class_count;
  m.validate();
  return m;
}

}  // namespace tgar
