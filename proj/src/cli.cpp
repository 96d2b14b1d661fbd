#include "tgar/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "tgar/config.hpp"
#include "tgar/verify.hpp"

namespace tgar {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::size_t> partitions;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "run config file");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "override the run seed");
  cmd->add_flag("--deterministic", c.deterministic, "force deterministic mode");
  cmd->add_option("--partitions", c.partitions, "override the partition count");
  cmd->add_option("--out", c.out, "output directory");
}

// Precedence: config file, then GT_SEED, then command-line flags.
RunConfig resolve_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
  apply_environment(rc);
  if (c.seed) rc.train.seed = *c.seed;
  if (c.deterministic) rc.train.deterministic = true;
  if (c.partitions) rc.train.partitions = *c.partitions;
  if (!c.out.empty()) rc.out_dir = c.out;
  return rc;
}

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

PartitionPlan make_plan(const RunConfig& rc, const Graph& g) {
  return partition_even(g, rc.train.partitions, {rc.partition_seed, rc.contiguous_partitions});
}

ClusterAssignment make_clusters(const RunConfig& rc, const Graph& g) {
  if (!rc.clusters_file.empty()) return load_clusters(rc.clusters_file, g.num_nodes());
  return cluster_louvain(g, rc.louvain_seed);
}

int cmd_partition(const Common& c, std::ostream& out) {
  const auto rc = resolve_config(c);
  const auto data = load_run_data(rc);
  const auto& g = data.graph;
  const auto plan = make_plan(rc, g);
  const auto clusters = make_clusters(rc, g);
  fs::create_directories(rc.out_dir);
  write_plan(plan, rc.out_dir / "plan.txt");
  write_clusters(clusters, rc.out_dir / "clusters.txt");

  std::ostringstream s;
  s << "nodes\t" << g.num_nodes() << "\nedges\t" << g.num_edges() << "\npartitions\t" << plan.partition_count()
    << '\n';
  s << "partition\tmasters\tmirrors\tedges\n";
  for (part_id p = 0; p < plan.partition_count(); ++p) {
    s << p << '\t' << plan.master_count(p) << '\t' << plan.mirror_count(p) << '\t' << plan.edges_of(p).size()
      << '\n';
  }
  s << "replica_factor_placeholder\t" << num(replica_factor(plan, true)) << '\n';
  s << "replica_factor_classic\t" << num(replica_factor(plan, false)) << '\n';
  s << "clusters\t" << clusters.cluster_count << '\n';
  s << "modularity\t" << num(modularity(g, clusters.cluster_of)) << '\n';
  for (const auto& w : clusters.warnings) s << "warning\t" << w << '\n';
  std::ofstream(rc.out_dir / "partition_stats.txt") << s.str();
  out << s.str();
  return kExitOk;
}

void write_summary(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  for (const auto& [k, v] : kv) f << k << '\t' << v << '\n';
}

int cmd_train(const Common& c, std::ostream& out, std::ostream& err, const std::atomic<bool>* stop) {
  const auto rc = resolve_config(c);
  const auto data = load_run_data(rc);
  const auto spec = resolve_model(rc, data);
  const Model model(spec, data.graph);
  const auto plan = make_plan(rc, data.graph);
  std::optional<ClusterAssignment> clusters;
  if (rc.train.strategy == Strategy::cluster) clusters = make_clusters(rc, data.graph);
  Trainer trainer(data, model, plan, rc.train, clusters ? &*clusters : nullptr);

  fs::create_directories(rc.out_dir);
  {
    RunConfig effective = rc;
    effective.model = spec;
    std::ofstream(rc.out_dir / "config.ini") << effective.serialize();
  }
  const auto initial = model.init_params(rc.train.seed);
  const auto hash = spec.hash();
  // Stays the best checkpoint when no step runs.
  write_checkpoint({hash, 0, 0, initial}, rc.out_dir / "best.ckpt");
  ParameterManager manager(initial, rc.train.optimizer);

  FitOptions fo;
  fo.metrics_path = rc.out_dir / "metrics.tsv";
  fo.counters_path = rc.out_dir / "counters.tsv";
  fo.best_checkpoint = rc.out_dir / "best.ckpt";
  fo.last_checkpoint = rc.out_dir / "last.ckpt";
  fo.stop = stop;
  FitResult fit;
  try {
    fit = trainer.fit(manager, fo);
  } catch (const NumericError& e) {
    write_summary(rc.out_dir / "summary.txt", {{"status", "diverged"}, {"error", e.what()}});
    err << "tgar: " << e.what() << '\n';
    return kExitNumeric;
  }
  const auto last = manager.latest();
  write_checkpoint({hash, last->version, fit.steps_run, last->params}, fo.last_checkpoint);

  const auto e = fit.steps_run ? fit.best : trainer.evaluate(initial);
  const double f1 = macro_f1(e.predicted, data.labels, data.test, data.class_count);
  write_summary(rc.out_dir / "summary.txt",
                {{"status", fit.interrupted ? "interrupted" : "ok"},
                 {"steps_run", std::to_string(fit.steps_run)},
                 {"early_stopped", fit.early_stopped ? "true" : "false"},
                 {"best_step", std::to_string(fit.best_step)},
                 {"spec_hash", std::to_string(hash)},
                 {"train_acc", num(e.train_acc)},
                 {"val_acc", num(e.val_acc)},
                 {"test_acc", num(e.test_acc)},
                 {"test_macro_f1", num(f1)},
                 {"max_staleness", std::to_string(fit.max_staleness)},
                 {"mean_staleness", num(fit.mean_staleness)}});
  out << "steps " << fit.steps_run << " best_step " << fit.best_step << " val_acc " << num(e.val_acc) << '\n';
  out << "test accuracy " << num(e.test_acc) << " macro-F1 " << num(f1) << '\n';
  if (fit.interrupted) {
    err << "tgar: interrupted, wrote " << fo.last_checkpoint.string() << '\n';
    return kExitInterrupted;
  }
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split, std::ostream& out) {
  const auto rc = resolve_config(c);
  const auto data = load_run_data(rc);
  const auto spec = resolve_model(rc, data);
  const fs::path path = checkpoint.empty() ? rc.out_dir / "best.ckpt" : fs::path(checkpoint);
  const auto ck = read_checkpoint(path);
  if (ck.spec_hash != spec.hash()) {
    throw ConfigError("checkpoint " + path.string() + " was written for a different model (spec hash " +
                      std::to_string(ck.spec_hash) + ", config gives " + std::to_string(spec.hash()) + ")");
  }
  const Model model(spec, data.graph);
  if (!model.init_params(0).compatible(ck.params)) throw ConfigError("checkpoint parameters do not fit the model");
  // Inference always runs on the whole graph; partitioning does not change it.
  TrainingConfig tc = rc.train;
  tc.strategy = Strategy::global;
  tc.partitions = 1;
  tc.workers = 1;
  const auto plan = partition_even(data.graph, 1);
  Trainer trainer(data, model, plan, tc);
  const auto e = trainer.evaluate(ck.params);
  const std::vector<node_id>* nodes = nullptr;
  double acc = 0;
  if (split == "train") {
    nodes = &data.train;
    acc = e.train_acc;
  } else if (split == "val") {
    nodes = &data.validation;
    acc = e.val_acc;
  } else {
    nodes = &data.test;
    acc = e.test_acc;
  }
  out << "split " << split << " nodes " << nodes->size() << '\n';
  out << "accuracy " << num(acc) << '\n';
  out << "macro_f1 " << num(macro_f1(e.predicted, data.labels, *nodes, data.class_count)) << '\n';
  return kExitOk;
}

void print_check(std::ostream& out, const CheckResult& r) {
  out << (r.pass ? "PASS " : "FAIL ") << r.name << ' ' << std::setprecision(3) << r.value << " < " << r.tolerance;
  if (!r.detail.empty()) out << ' ' << r.detail;
  out << '\n';
}

int cmd_gradcheck(const Common& c, const std::string& fault, std::ostream& out) {
  const auto rc = resolve_config(c);
  const auto results = gradcheck_suite(rc.train.seed, fault);
  std::size_t failed = 0;
  for (const auto& r : results) {
    print_check(out, r);
    failed += !r.pass;
  }
  out << results.size() - failed << '/' << results.size() << " checks passed\n";
  return failed ? kExitNumeric : kExitOk;
}

// Engine GCN forward against the dense recursion, on the configured graph
// when it is small enough and GCN-only, else on seeded random graphs.
int cmd_oracle(const Common& c, std::size_t graphs, std::ostream& out) {
  constexpr double kTol = 1e-10;
  const auto rc = resolve_config(c);
  const std::size_t P = rc.train.partitions;
  double worst = 0;
  std::vector<std::pair<std::string, double>> rows;
  bool from_config = false;
  if (!c.config.empty()) {
    const auto data = load_run_data(rc);
    const auto spec = resolve_model(rc, data);
    const bool gcn_only = std::all_of(spec.layers.begin(), spec.layers.end(),
                                      [](const LayerSpec& l) { return l.kind == LayerKind::gcn; });
    if (!gcn_only) throw ConfigError("oracle compares GCN layers only");
    if (data.graph.num_nodes() > kOracleMaxNodes) {
      out << "graph has " << data.graph.num_nodes() << " nodes, above the dense limit of " << kOracleMaxNodes
          << "; using random graphs\n";
    } else {
      const Model model(spec, data.graph);
      rows.push_back({"config", engine_vs_dense(data.graph, spec, model.init_params(rc.train.seed), P)});
      from_config = true;
    }
  }
  if (!from_config) {
    for (std::size_t i = 0; i < graphs; ++i) {
      const std::uint64_t s = rc.train.seed * 1000 + i;
      RandomGraphOptions o;
      o.nodes = 8 + s % 25;
      o.edges = o.nodes * (1 + s % 4);
      o.feature_dim = 3;
      o.weighted = true;
      o.seed = s;
      const auto g = random_graph(o);
      ModelSpec spec;
      spec.input_dim = 3;
      spec.class_count = 2;
      spec.decoder = DecoderKind::identity;
      spec.keep_prob = 1;
      spec.norm = (i % 2) ? GcnNorm::laplacian : GcnNorm::renormalized;
      spec.add_self_loops = i % 3 == 0;
      const std::size_t K = 1 + i % 3;
      for (std::size_t k = 0; k < K; ++k)
        spec.layers.push_back({LayerKind::gcn, k + 1 == K ? std::size_t{2} : std::size_t{4}, k + 1 == K ? Activation::identity : Activation::tanh,
                               i % 2 == 0});
      const Model model(spec, g);
      rows.push_back({"random" + std::to_string(i) + " N=" + std::to_string(o.nodes) + " K=" + std::to_string(K),
                      engine_vs_dense(g, spec, model.init_params(s), std::min(P, o.nodes))});
    }
  }
  for (const auto& [name, diff] : rows) {
    worst = std::max(worst, diff);
    out << (diff < kTol ? "PASS " : "FAIL ") << name << " max_abs_diff " << std::setprecision(3) << diff << '\n';
  }
  out << "worst " << std::setprecision(3) << worst << " tolerance " << kTol << '\n';
  return worst < kTol ? kExitOk : kExitNumeric;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const std::atomic<bool>* stop) {
  CLI::App app{"tgar: partitioned graph neural network training", "tgar"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, split = "test", fault;
  std::size_t graphs = 10;

  auto* partition = app.add_subcommand("partition", "write a partition plan, clusters and stats");
  add_common(partition, common, true);
  auto* train = app.add_subcommand("train", "train a model and write metrics and checkpoints");
  add_common(train, common, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the full graph");
  add_common(eval, common, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default: <out>/best.ckpt)");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* gradcheck = app.add_subcommand("gradcheck", "run the gradient and oracle check suite");
  add_common(gradcheck, common, false);
  gradcheck->add_option("--inject-fault", fault, "corrupt the named check (harness self-test)");
  auto* oracle = app.add_subcommand("oracle", "compare the engine GCN forward with the dense recursion");
  add_common(oracle, common, false);
  oracle->add_option("--graphs", graphs, "random graphs when no small config graph is given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*partition) return cmd_partition(common, out);
    if (*train) return cmd_train(common, out, err, stop);
    if (*eval) return cmd_eval(common, checkpoint, split, out);
    if (*gradcheck) return cmd_gradcheck(common, fault, out);
    if (*oracle) return cmd_oracle(common, graphs, out);
  } catch (const NumericError& e) {
    err << "tgar: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "tgar: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace tgar
