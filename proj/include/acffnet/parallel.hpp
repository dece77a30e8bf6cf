#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace acff {

namespace detail {

inline std::atomic<int>& thread_setting() {
  static std::atomic<int> setting{0};
  return setting;
}

inline int threads_from_env() {
  if (const char* env = std::getenv("ACFF_THREADS")) {
    try {
      int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace detail

// Worker count used by parallel_for. ACFF_THREADS overrides the hardware default.
inline int num_threads() {
  int v = detail::thread_setting().load();
  if (v <= 0) {
    v = detail::threads_from_env();
    detail::thread_setting().store(v);
  }
  return v;
}

inline void set_num_threads(int n) { detail::thread_setting().store(std::max(1, n)); }

// Restores the previous worker count on scope exit.
class ScopedThreads {
 public:
  explicit ScopedThreads(int n) : saved_(num_threads()) { set_num_threads(n); }
  ~ScopedThreads() { set_num_threads(saved_); }
  ScopedThreads(const ScopedThreads&) = delete;
  ScopedThreads& operator=(const ScopedThreads&) = delete;

 private:
  int saved_;
};

// Runs fn(i) for i in [0, count). Iterations must write disjoint memory;
// results are then independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t min_per_worker = 1) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(num_threads()),
                            count / std::max<std::size_t>(1, min_per_worker));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(count, chunk); ++i) fn(i);
}

}  // namespace acff
