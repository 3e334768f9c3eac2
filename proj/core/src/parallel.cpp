#include "ugdiff/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace ugdiff {
namespace {

int env_thread_cap() {
  const char* s = std::getenv("UGDIFF_THREADS");
  if (!s) return 0;
  int v = std::atoi(s);
  return v > 0 ? v : 0;
}

std::atomic<int> g_max_threads{0};

int resolve_threads() {
  int n = g_max_threads.load();
  if (n > 0) return n;
  int env = env_thread_cap();
  if (env > 0) return env;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Minimal eager pool: workers sleep on a condition variable and pick up one
// chunk each when a job is posted. Job granularity here is a whole
// convolution plane, so wakeup cost is noise.
class Pool {
 public:
  static Pool& instance() {
    // Leaked on purpose: workers park on the condition variable for the
    // process lifetime and must not be joined during static destruction.
    static Pool* p = new Pool();
    return *p;
  }

  void run(int n, int workers, const std::function<void(int)>& fn) {
    ensure_workers(workers - 1);
    {
      std::unique_lock<std::mutex> lk(m_);
      fn_ = &fn;
      total_ = n;
      chunks_ = workers;
      pending_ = workers - 1;
      epoch_++;
    }
    cv_.notify_all();
    work_chunks(0, workers, n, fn);  // caller participates
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  Pool() = default;

  void ensure_workers(int n) {
    std::unique_lock<std::mutex> lk(m_);
    while (static_cast<int>(threads_.size()) < n) {
      int id = static_cast<int>(threads_.size()) + 1;
      threads_.emplace_back([this, id] { worker_loop(id); });
    }
  }

  void work_chunks(int chunk, int chunks, int n, const std::function<void(int)>& fn) {
    std::int64_t lo = static_cast<std::int64_t>(n) * chunk / chunks;
    std::int64_t hi = static_cast<std::int64_t>(n) * (chunk + 1) / chunks;
    for (std::int64_t i = lo; i < hi; ++i) fn(static_cast<int>(i));
  }

  void worker_loop(int id) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* fn = nullptr;
      int n = 0, chunks = 0;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        fn = fn_;
        n = total_;
        chunks = chunks_;
      }
      if (fn && id < chunks) work_chunks(id, chunks, n, *fn);
      {
        std::unique_lock<std::mutex> lk(m_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int)>* fn_ = nullptr;
  int total_ = 0, chunks_ = 0, pending_ = 0;
  std::uint64_t epoch_ = 0;
};

thread_local int t_force_single = 0;

}  // namespace

void set_max_threads(int n) { g_max_threads.store(n); }

int max_threads() { return t_force_single ? 1 : resolve_threads(); }

void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = max_threads();
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  Pool::instance().run(n, workers, fn);
}

SingleThreadScope::SingleThreadScope() : saved_(t_force_single) { t_force_single = 1; }
SingleThreadScope::~SingleThreadScope() { t_force_single = saved_; }

}  // namespace ugdiff
