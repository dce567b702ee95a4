#ifndef VITAE_PARALLEL_HPP_
#define VITAE_PARALLEL_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace vitae {

// Intra-op worker count: min(hardware_concurrency, VITAE_THREADS).
inline int max_threads() {
  static int n = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("VITAE_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
  }();
  return n;
}

// Splits [begin, end) into contiguous chunks, one per worker. Each index is
// processed by exactly one thread, so per-element summation order never
// depends on the thread count; results are bit-identical for any setting.
inline void parallel_for(int64_t begin, int64_t end,
                         const std::function<void(int64_t, int64_t)>& body,
                         int64_t grain = 1) {
  int64_t n = end - begin;
  if (n <= 0) return;
  int workers = max_threads();
  if (workers <= 1 || n < 2 * grain) {
    body(begin, end);
    return;
  }
  int64_t chunks = std::min<int64_t>(workers, (n + grain - 1) / grain);
  int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(size_t(chunks));
  for (int64_t c = 0; c < chunks; ++c) {
    int64_t lo = begin + c * per;
    int64_t hi = std::min(end, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace vitae

#endif
