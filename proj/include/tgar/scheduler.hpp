#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace tgar {

/// Work-stealing task queue.
///
/// Tasks added before run() are dealt round-robin to per-worker deques in id
/// order. A worker pops from the head of its own deque; when it is empty it
/// steals from the tail of the longest deque (ties go to the lowest worker id).
/// A task becomes runnable once all its dependencies finished, and is then
/// appended to the deque of the worker that completed its last dependency.
class TaskScheduler {
 public:
  using TaskId = std::size_t;

  explicit TaskScheduler(std::size_t workers = 1);
  ~TaskScheduler();
  TaskScheduler(const TaskScheduler&) = delete;
  TaskScheduler& operator=(const TaskScheduler&) = delete;

  std::size_t workers() const { return workers_; }

  TaskId add(std::function<void()> fn, std::vector<TaskId> deps = {});
  void add_dependency(TaskId task, TaskId depends_on);

  struct Report {
    /// Worker that executed each task.
    std::vector<std::size_t> worker_of;
    /// Task ids in completion order.
    std::vector<TaskId> completion_order;
    std::size_t steals = 0;
  };

  /// Executes every pending task exactly once and clears the queue. The first
  /// exception thrown by a task is rethrown after all workers stopped. Throws
  /// ConfigError on a dependency cycle.
  Report run();

  /// Runs `count` independent tasks `fn(i)` and waits for all of them.
  void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

  struct SimTask {
    double cost = 1;
    std::vector<TaskId> deps;
  };

  /// Deterministic discrete-time replay of the same policy with given task
  /// costs. `initial_owner`, when non-empty, overrides the round-robin deal.
  static Report simulate(const std::vector<SimTask>& tasks, std::size_t workers,
                         const std::vector<std::size_t>& initial_owner = {});

 private:
  struct Task {
    std::function<void()> fn;
    std::vector<TaskId> deps;
  };

  void worker_loop(std::size_t id);
  bool take(std::size_t worker, TaskId& out, bool& stolen);

  std::size_t workers_;
  std::vector<Task> tasks_;

  // Run state, guarded by mu_.
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_cv_;
  std::vector<std::deque<TaskId>> queues_;
  std::vector<std::size_t> remaining_deps_;
  std::vector<std::vector<TaskId>> dependents_;
  std::size_t unfinished_ = 0;
  std::size_t active_workers_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
  bool failed_ = false;
  std::exception_ptr error_;
  Report report_;
  std::vector<std::thread> threads_;
};

}  // namespace tgar
