#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace glc {

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> count{1};
  return count;
}
}  // namespace detail

/// Worker count for intra-op parallelism. 1 is the single-threaded reference mode.
inline int num_threads() { return detail::thread_count().load(); }
inline void set_num_threads(int n) { detail::thread_count().store(std::max(1, n)); }

/// Static partition of [0, n). Every index is handled by exactly one worker and
/// workers never share outputs, so results do not depend on the thread count.
template <class Fn>
void parallel_for(std::int64_t n, std::int64_t min_chunk, Fn&& fn) {
  const int workers = static_cast<int>(
      std::min<std::int64_t>(num_threads(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_chunk))));
  if (workers <= 1) {
    fn(std::int64_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    const std::int64_t begin = w * chunk;
    const std::int64_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(std::int64_t{0}, std::min(n, chunk));
}

}  // namespace glc
