#pragma once

#include <functional>

namespace ugdiff {

// Worker cap for the data-parallel kernels. Resolution order: explicit
// set_max_threads(), then the UGDIFF_THREADS environment variable, then the
// hardware concurrency. The coding path pins itself to one thread via
// SingleThreadScope regardless of this setting.
void set_max_threads(int n);
int max_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker; every index is computed by exactly one thread with a fixed inner
// order, so results do not depend on the thread count.
void parallel_for(int n, const std::function<void(int)>& fn);

struct SingleThreadScope {
  SingleThreadScope();
  ~SingleThreadScope();
  SingleThreadScope(const SingleThreadScope&) = delete;
  SingleThreadScope& operator=(const SingleThreadScope&) = delete;

 private:
  int saved_;
};

}  // namespace ugdiff
