#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace tsflow {

inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> n{0};  // 0 = use hardware concurrency
  return n;
}

inline void set_num_threads(int n) { thread_count_ref().store(n); }

inline int num_threads() {
  int n = thread_count_ref().load();
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Splits [begin, end) into contiguous chunks, one per worker. Chunk
// boundaries depend only on the range, and workers write disjoint output,
// so results are identical at any thread count.
inline void parallel_for(int begin, int end, const std::function<void(int, int)>& body) {
  int n = end - begin;
  if (n <= 0) return;
  int workers = std::min(num_threads(), n);
  if (workers <= 1) {
    body(begin, end);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  int chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int lo = begin + w * chunk;
    int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace tsflow
