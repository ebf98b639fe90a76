#include "morphtrack/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace morphtrack {

int max_threads() {
  static const int cached = [] {
    const char* env = std::getenv("MORPHTRACK_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v >= 1 ? v : 1;
  }();
  return cached;
}

void parallel_for(int n, const std::function<void(int, int)>& fn) {
  const int nt = std::min(max_threads(), n);
  if (nt <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nt));
  const int chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    const int lo = t * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace morphtrack
