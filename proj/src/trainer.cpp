#include "tgar/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
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

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::global: return "global";
    case Strategy::mini: return "mini";
    case Strategy::cluster: return "cluster";
  }
  return "?";
}
std::string to_string(UpdateMode m) { return m == UpdateMode::sync ? "sync" : "async"; }
std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

Strategy parse_strategy(const std::string& s) {
  if (s == "global") return Strategy::global;
  if (s == "mini") return Strategy::mini;
  if (s == "cluster") return Strategy::cluster;
  throw ConfigError("unknown strategy '" + s + "'");
}
UpdateMode parse_update_mode(const std::string& s) {
  if (s == "sync") return UpdateMode::sync;
  if (s == "async") return UpdateMode::async;
  throw ConfigError("unknown update mode '" + s + "'");
}
OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainingConfig::validate() const {
  if (partitions == 0) throw ConfigError("partition count must be >= 1");
  if (workers == 0) throw ConfigError("worker count must be >= 1");
  if (strategy == Strategy::mini && !(batch_fraction > 0 && batch_fraction <= 1)) {
    throw ConfigError("mini-batch fraction must be in (0, 1]");
  }
  if (strategy == Strategy::cluster && gamma == 0) throw ConfigError("gamma must be >= 1");
  if (mode == UpdateMode::async && in_flight == 0) throw ConfigError("async mode needs in_flight >= 1");
  if (!(optimizer.lr > 0) || !std::isfinite(optimizer.lr)) throw ConfigError("learning rate must be positive");
}

Batch select_batch(Strategy strategy, const std::vector<node_id>& train, const ClusterAssignment* clusters,
                   std::size_t gamma, double fraction, std::uint64_t step, std::uint64_t seed) {
  if (train.empty()) throw ConfigError("no labeled train nodes to draw a batch from");
  Batch b;
  std::mt19937_64 rng(mix(seed ^ mix(step + 1)));
  switch (strategy) {
    case Strategy::global:
      b.targets = train;
      break;
    case Strategy::mini: {
      const auto want = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size()))), 1, train.size());
      std::sample(train.begin(), train.end(), std::back_inserter(b.targets), want, rng);
      break;
    }
    case Strategy::cluster: {
      if (!clusters) throw ConfigError("cluster strategy needs a cluster assignment");
      std::vector<std::uint8_t> has_train(clusters->cluster_count, 0);
      for (auto v : train) has_train[clusters->cluster_of.at(v)] = 1;
      std::vector<std::uint32_t> eligible;
      for (std::uint32_t c = 0; c < clusters->cluster_count; ++c)
        if (has_train[c]) eligible.push_back(c);
      std::sample(eligible.begin(), eligible.end(), std::back_inserter(b.clusters),
                  std::min(gamma, eligible.size()), rng);
      std::vector<std::uint8_t> chosen(clusters->cluster_count, 0);
      for (auto c : b.clusters) chosen[c] = 1;
      for (auto v : train)
        if (chosen[clusters->cluster_of[v]]) b.targets.push_back(v);
      break;
    }
  }
  std::sort(b.targets.begin(), b.targets.end());
  if (b.targets.empty()) throw ConfigError("batch selection produced no targets");
  return b;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels, const std::vector<node_id>& nodes) {
  if (nodes.empty()) return 0;
  std::size_t hit = 0;
  for (auto v : nodes) hit += predicted[v] == labels[v];
  return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

double macro_f1(const std::vector<int>& predicted, const std::vector<int>& labels, const std::vector<node_id>& nodes,
                std::size_t class_count) {
  std::vector<std::size_t> tp(class_count, 0), fp(class_count, 0), fn(class_count, 0);
  for (auto v : nodes) {
    const auto y = static_cast<std::size_t>(labels[v]);
    const auto p = static_cast<std::size_t>(predicted[v]);
    if (y == p) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++present;
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  return present ? sum / static_cast<double>(present) : 0;
}

Trainer::Trainer(const DatasetBundle& data, const Model& model, const PartitionPlan& plan, TrainingConfig config,
                 const ClusterAssignment* clusters)
    : data_(data), model_(model), plan_(plan), config_(std::move(config)), clusters_(clusters) {
  config_.validate();
  if (plan.partition_count() != config_.partitions) {
    throw ConfigError("partition plan has " + std::to_string(plan.partition_count()) + " partitions, config says " +
                      std::to_string(config_.partitions));
  }
  if (data.class_count != model.spec().class_count) throw ConfigError("dataset and model disagree on class count");
  for (auto v : data.train)
    if (data.labels[v] < 0) throw ConfigError("train node " + std::to_string(v) + " has no label");
  if (config_.workers > 1) scheduler_ = std::make_unique<TaskScheduler>(config_.workers);
}

Trainer::~Trainer() = default;

Batch Trainer::batch(std::uint64_t step) const {
  return select_batch(config_.strategy, data_.train, clusters_, config_.gamma, config_.batch_fraction, step,
                      config_.seed);
}

GraphView Trainer::view_for(const Batch& batch, std::uint64_t step) const {
  ViewOptions o;
  o.layers = model_.layers();
  o.fanout = config_.fanout;
  o.seed = mix(config_.seed ^ mix(step + 0x51ULL));
  o.undirected = config_.undirected;
  if (config_.strategy == Strategy::cluster && !config_.cluster_boundary) {
    if (!clusters_) throw ConfigError("cluster strategy needs a cluster assignment");
    o.allowed.assign(data_.graph.num_nodes(), 0);
    std::vector<std::uint8_t> chosen(clusters_->cluster_count, 0);
    for (auto c : batch.clusters) chosen[c] = 1;
    for (node_id v = 0; v < data_.graph.num_nodes(); ++v) o.allowed[v] = chosen[clusters_->cluster_of[v]];
  }
  return build_view(data_.graph, batch.targets, o);
}

StepResult Trainer::run_task(const GraphView& view, const ParameterSet& params, std::uint64_t step, bool training,
                             TaskScheduler* scheduler, Evaluation* eval) {
  if (view.targets().empty()) throw ConfigError("view has no targets");
  const Graph& g = data_.graph;
  InMemoryTransport transport(plan_.partition_count());
  Execution exec(g, plan_, view, transport, scheduler);
  exec.set_input_grad(training && input_grad_);
  StageContext ctx;
  ctx.training = training;
  ctx.seed = config_.seed;
  ctx.step = step;
  const int K = model_.layers();
  for (int k = 1; k <= K; ++k) {
    ctx.layer = k;
    exec.forward_layer(model_.program(k), params, ctx);
  }

  StepResult res;
  res.targets = view.targets().size();
  res.touched = view.touched();
  const real row_weight = real{1} / static_cast<real>(res.targets);
  ExactSum loss;
  std::size_t labeled = 0;
  if (eval) {
    eval->predicted.assign(g.num_nodes(), -1);
    eval->node_loss.assign(g.num_nodes(), 0);
  }
  for (part_id p = 0; p < plan_.partition_count(); ++p) {
    const auto& nodes = exec.output_nodes(p);
    std::vector<int> labels(nodes.size());
    for (std::size_t r = 0; r < nodes.size(); ++r) labels[r] = data_.labels[nodes[r]];
    auto d = decode_and_loss(model_, params, exec.output(p), labels, row_weight, training ? &exec.sinks(p) : nullptr);
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      if (labels[r] < 0) continue;
      ++labeled;
      loss.add(d.row_loss[r]);
      res.correct += d.predicted[r] == labels[r];
    }
    if (eval) {
      for (std::size_t r = 0; r < nodes.size(); ++r) {
        eval->predicted[nodes[r]] = d.predicted[r];
        eval->node_loss[nodes[r]] = d.row_loss[r];
      }
    }
    if (training) exec.set_output_grad(p, std::move(d.grad_h));
  }
  if (training && labeled == 0) throw ConfigError("batch has no labeled targets");
  res.data_loss = labeled ? loss.value() / static_cast<double>(labeled) : 0;
  if (!std::isfinite(res.data_loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
  if (training) {
    for (int k = K; k >= 1; --k) {
      ctx.layer = k;
      exec.backward_layer(model_.program(k), params, ctx);
    }
    res.grads = reduce_params(params, exec.contributions(model_.layer_of_param()));
    if (input_grad_) {
      res.input_grad = Tensor(g.num_nodes(), g.feature_dim());
      for (part_id p = 0; p < plan_.partition_count(); ++p) {
        const auto& nodes = exec.input_nodes(p);
        const auto& gx = exec.input_grad(p);
        for (std::size_t r = 0; r < nodes.size(); ++r)
          std::copy(gx.row(r).begin(), gx.row(r).end(), res.input_grad.row(nodes[r]).begin());
      }
    }
    res.penalty = model_.penalty(params);
    model_.add_penalty_grad(params, res.grads);
    for (const auto& t : res.grads.tensors) t.check_finite("parameter gradient");
  }
  res.loss = res.data_loss + res.penalty;
  res.messages = transport.messages();
  res.bytes = transport.bytes();
  res.counters = exec.counters();
  return res;
}

StepResult Trainer::train_step(const GraphView& view, const ParameterSet& params, std::uint64_t step) {
  return run_task(view, params, step, true, scheduler_.get(), nullptr);
}

Evaluation Trainer::evaluate(const ParameterSet& params) {
  std::vector<node_id> all(data_.graph.num_nodes());
  for (node_id v = 0; v < all.size(); ++v) all[v] = v;
  ViewOptions o;
  o.layers = model_.layers();
  const auto view = build_view(data_.graph, all, o);
  Evaluation e;
  run_task(view, params, 0, false, scheduler_.get(), &e);
  auto split = [&](const std::vector<node_id>& nodes, double& acc, double& loss) {
    acc = accuracy(e.predicted, data_.labels, nodes);
    ExactSum s;
    for (auto v : nodes) s.add(e.node_loss[v]);
    loss = nodes.empty() ? 0 : s.value() / static_cast<double>(nodes.size());
  };
  split(data_.train, e.train_acc, e.train_loss);
  split(data_.validation, e.val_acc, e.val_loss);
  split(data_.test, e.test_acc, e.test_loss);
  return e;
}

FitResult Trainer::fit(ParameterManager& manager, const FitOptions& options) {
  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path);
    if (!metrics) throw Error("cannot write " + options.metrics_path.string());
    metrics << "step\tloss\ttrain_acc\tval_acc\tmsgs\twall_ms\n";
    metrics.precision(17);
  }
  std::ofstream counters;
  if (!options.counters_path.empty()) {
    counters.open(options.counters_path);
    if (!counters) throw Error("cannot write " + options.counters_path.string());
    counters << "step\tmessages\tbytes\tgather_invocations\tframes_allocated\tframes_released\n";
  }
  const auto spec_hash = model_.spec().hash();
  FitResult out;
  bool have_best = false;
  double best_val = -1, best_val_loss = 0;
  std::size_t since_best = 0;
  std::size_t staleness_sum = 0, updates = 0;

  auto record = [&](std::uint64_t step, const StepResult& r, std::size_t staleness, double wall_ms) {
    const auto version = manager.update(r.grads);
    out.max_staleness = std::max(out.max_staleness, staleness);
    staleness_sum += staleness;
    ++updates;
    const auto e = evaluate(version->params);
    out.losses.push_back(r.loss);
    ++out.steps_run;
    if (metrics) {
      metrics << step << '\t' << r.loss << '\t'
              << static_cast<double>(r.correct) / static_cast<double>(r.targets) << '\t' << e.val_acc << '\t'
              << r.messages << '\t' << (config_.deterministic ? 0.0 : wall_ms) << '\n';
      metrics.flush();
    }
    if (counters) {
      counters << step << '\t' << r.messages << '\t' << r.bytes << '\t' << r.counters.gather_invocations << '\t'
               << r.counters.frames_allocated << '\t' << r.counters.frames_released << '\n';
      counters.flush();
    }
    if (!have_best || e.val_acc > best_val || (e.val_acc == best_val && e.val_loss < best_val_loss)) {
      have_best = true;
      best_val = e.val_acc;
      best_val_loss = e.val_loss;
      since_best = 0;
      out.best_step = static_cast<std::size_t>(step);
      out.best_params = version->params;
      out.best = e;
      if (!options.best_checkpoint.empty()) {
        write_checkpoint({spec_hash, version->version, step, version->params}, options.best_checkpoint);
      }
    } else {
      ++since_best;
    }
  };

  using clock = std::chrono::steady_clock;
  std::uint64_t step = 0;
  while (step < config_.steps) {
    if (options.stop && options.stop->load()) {
      out.interrupted = true;
      break;
    }
    if (config_.patience && since_best >= config_.patience) {
      out.early_stopped = true;
      break;
    }
    const auto start = clock::now();
    const auto snapshot = manager.latest();
    const std::size_t wave =
        config_.mode == UpdateMode::sync ? 1 : std::min<std::size_t>(config_.in_flight, config_.steps - step);
    std::vector<StepResult> results(wave);
    auto one = [&](std::size_t i, TaskScheduler* sched) {
      const auto b = batch(step + i);
      const auto view = view_for(b, step + i);
      return run_task(view, snapshot->params, step + i, true, sched, nullptr);
    };
    try {
      if (wave == 1 || config_.deterministic) {
        for (std::size_t i = 0; i < wave; ++i) results[i] = one(i, scheduler_.get());
      } else {
        std::vector<std::future<StepResult>> running;
        for (std::size_t i = 0; i < wave; ++i) running.push_back(std::async(std::launch::async, one, i, nullptr));
        for (std::size_t i = 0; i < wave; ++i) results[i] = running[i].get();
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (step " + std::to_string(step) + ")");
    }
    const double wall_ms =
        std::chrono::duration<double, std::milli>(clock::now() - start).count() / static_cast<double>(wave);
    for (std::size_t i = 0; i < wave; ++i) {
      const auto staleness = static_cast<std::size_t>(manager.latest_version() - snapshot->version);
      record(step, results[i], staleness, wall_ms);
      ++step;
    }
  }
  if (out.interrupted && !options.last_checkpoint.empty()) {
    const auto v = manager.latest();
    write_checkpoint({spec_hash, v->version, step, v->params}, options.last_checkpoint);
  }
  out.mean_staleness = updates ? static_cast<double>(staleness_sum) / static_cast<double>(updates) : 0;
  return out;
}

}  // namespace tgar
