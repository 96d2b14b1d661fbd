#include "tgar/scheduler.hpp"

#include <algorithm>
#include <limits>

#include "tgar/types.hpp"

namespace tgar {

namespace {

// Kahn's algorithm; throws on a cycle.
void check_acyclic(const std::vector<std::vector<std::size_t>>& deps) {
  const std::size_t n = deps.size();
  std::vector<std::size_t> indeg(n, 0);
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    for (auto d : deps[t]) {
      out[d].push_back(t);
      ++indeg[t];
    }
  }
  std::vector<std::size_t> ready;
  for (std::size_t t = 0; t < n; ++t)
    if (indeg[t] == 0) ready.push_back(t);
  std::size_t seen = 0;
  while (!ready.empty()) {
    const auto t = ready.back();
    ready.pop_back();
    ++seen;
    for (auto s : out[t])
      if (--indeg[s] == 0) ready.push_back(s);
  }
  if (seen != n) throw ConfigError("task dependency cycle detected");
}

// Index of the longest deque, lowest index on ties; npos when all are empty.
template <typename Queues>
std::size_t busiest(const Queues& qs) {
  std::size_t best = std::numeric_limits<std::size_t>::max();
  std::size_t best_len = 0;
  for (std::size_t w = 0; w < qs.size(); ++w) {
    if (qs[w].size() > best_len) {
      best_len = qs[w].size();
      best = w;
    }
  }
  return best;
}

}  // namespace

TaskScheduler::TaskScheduler(std::size_t workers) : workers_(std::max<std::size_t>(1, workers)) {
  if (workers_ > 1) {
    for (std::size_t w = 0; w < workers_; ++w) threads_.emplace_back([this, w] { worker_loop(w); });
  }
}

TaskScheduler::~TaskScheduler() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  for (auto& t : threads_) t.join();
}

TaskScheduler::TaskId TaskScheduler::add(std::function<void()> fn, std::vector<TaskId> deps) {
  for (auto d : deps) {
    if (d >= tasks_.size()) throw ConfigError("dependency on unknown task " + std::to_string(d));
  }
  tasks_.push_back({std::move(fn), std::move(deps)});
  return tasks_.size() - 1;
}

void TaskScheduler::add_dependency(TaskId task, TaskId depends_on) {
  if (task >= tasks_.size() || depends_on >= tasks_.size()) throw ConfigError("dependency on unknown task");
  tasks_[task].deps.push_back(depends_on);
}

bool TaskScheduler::take(std::size_t worker, TaskId& out, bool& stolen) {
  auto& own = queues_[worker];
  if (!own.empty()) {
    out = own.front();
    own.pop_front();
    stolen = false;
    return true;
  }
  const auto victim = busiest(queues_);
  if (victim == std::numeric_limits<std::size_t>::max()) return false;
  out = queues_[victim].back();
  queues_[victim].pop_back();
  stolen = true;
  return true;
}

void TaskScheduler::worker_loop(std::size_t id) {
  std::size_t seen = 0;
  std::unique_lock lock(mu_);
  while (true) {
    wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
    if (stop_) return;
    seen = generation_;
    while (unfinished_ > 0) {
      TaskId t = 0;
      bool stolen = false;
      if (!take(id, t, stolen)) {
        wake_.wait(lock, [&] {
          if (unfinished_ == 0) return true;
          for (const auto& q : queues_)
            if (!q.empty()) return true;
          return false;
        });
        continue;
      }
      if (stolen) ++report_.steals;
      const bool skip = failed_;
      lock.unlock();
      if (!skip) {
        try {
          tasks_[t].fn();
        } catch (...) {
          std::lock_guard g(mu_);
          if (!failed_) error_ = std::current_exception();
          failed_ = true;
        }
      }
      lock.lock();
      report_.worker_of[t] = id;
      report_.completion_order.push_back(t);
      for (auto d : dependents_[t])
        if (--remaining_deps_[d] == 0) queues_[id].push_back(d);
      --unfinished_;
      wake_.notify_all();
    }
    if (--active_workers_ == 0) done_cv_.notify_all();
  }
}

TaskScheduler::Report TaskScheduler::run() {
  std::vector<std::vector<std::size_t>> deps;
  deps.reserve(tasks_.size());
  for (const auto& t : tasks_) deps.push_back(t.deps);
  try {
    check_acyclic(deps);
  } catch (...) {
    tasks_.clear();
    throw;
  }

  const std::size_t n = tasks_.size();
  std::unique_lock lock(mu_);
  queues_.assign(workers_, {});
  remaining_deps_.assign(n, 0);
  dependents_.assign(n, {});
  report_ = Report{};
  report_.worker_of.assign(n, 0);
  failed_ = false;
  error_ = nullptr;
  std::size_t deal = 0;
  for (TaskId t = 0; t < n; ++t) {
    remaining_deps_[t] = tasks_[t].deps.size();
    for (auto d : tasks_[t].deps) dependents_[d].push_back(t);
  }
  for (TaskId t = 0; t < n; ++t) {
    if (remaining_deps_[t] == 0) queues_[deal++ % workers_].push_back(t);
  }
  unfinished_ = n;

  if (workers_ == 1) {
    while (unfinished_ > 0) {
      TaskId t = 0;
      bool stolen = false;
      take(0, t, stolen);
      lock.unlock();
      if (!failed_) {
        try {
          tasks_[t].fn();
        } catch (...) {
          error_ = std::current_exception();
          failed_ = true;
        }
      }
      lock.lock();
      report_.completion_order.push_back(t);
      for (auto d : dependents_[t])
        if (--remaining_deps_[d] == 0) queues_[0].push_back(d);
      --unfinished_;
    }
  } else if (n > 0) {
    active_workers_ = workers_;
    ++generation_;
    wake_.notify_all();
    done_cv_.wait(lock, [&] { return active_workers_ == 0; });
  }
  tasks_.clear();
  auto report = std::move(report_);
  auto error = error_;
  lock.unlock();
  if (error) std::rethrow_exception(error);
  return report;
}

void TaskScheduler::parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  if (workers_ == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  for (std::size_t i = 0; i < count; ++i) add([&fn, i] { fn(i); });
  run();
}

TaskScheduler::Report TaskScheduler::simulate(const std::vector<SimTask>& tasks, std::size_t workers,
                                              const std::vector<std::size_t>& initial_owner) {
  workers = std::max<std::size_t>(1, workers);
  const std::size_t n = tasks.size();
  std::vector<std::vector<std::size_t>> deps;
  for (const auto& t : tasks) {
    for (auto d : t.deps)
      if (d >= n) throw ConfigError("dependency on unknown task " + std::to_string(d));
    deps.push_back(t.deps);
  }
  check_acyclic(deps);
  if (!initial_owner.empty() && initial_owner.size() != n) throw ConfigError("initial owner list length mismatch");

  std::vector<std::deque<TaskId>> queues(workers);
  std::vector<std::size_t> remaining(n);
  std::vector<std::vector<TaskId>> dependents(n);
  for (TaskId t = 0; t < n; ++t) {
    remaining[t] = tasks[t].deps.size();
    for (auto d : tasks[t].deps) dependents[d].push_back(t);
  }
  std::size_t deal = 0;
  for (TaskId t = 0; t < n; ++t) {
    if (remaining[t] != 0) continue;
    const std::size_t w = initial_owner.empty() ? deal++ % workers : initial_owner[t];
    if (w >= workers) throw ConfigError("initial owner out of range");
    queues[w].push_back(t);
  }

  Report rep;
  rep.worker_of.assign(n, 0);
  constexpr auto kIdle = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> running(workers, kIdle);
  std::vector<double> finish(workers, 0);
  double now = 0;
  std::size_t done = 0;
  while (done < n) {
    for (std::size_t w = 0; w < workers; ++w) {
      if (running[w] != kIdle) continue;
      TaskId t = 0;
      if (!queues[w].empty()) {
        t = queues[w].front();
        queues[w].pop_front();
      } else {
        const auto v = busiest(queues);
        if (v == kIdle) continue;
        t = queues[v].back();
        queues[v].pop_back();
        ++rep.steals;
      }
      running[w] = t;
      finish[w] = now + tasks[t].cost;
      rep.worker_of[t] = w;
    }
    double next = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < workers; ++w)
      if (running[w] != kIdle) next = std::min(next, finish[w]);
    if (next == std::numeric_limits<double>::infinity()) throw ConfigError("simulation stalled");
    now = next;
    for (std::size_t w = 0; w < workers; ++w) {
      if (running[w] == kIdle || finish[w] != now) continue;
      const TaskId t = running[w];
      running[w] = kIdle;
      rep.completion_order.push_back(t);
      ++done;
      for (auto d : dependents[t])
        if (--remaining[d] == 0) queues[w].push_back(d);
    }
  }
  return rep;
}

}  // namespace tgar
