#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace minisvrt {

// Training churns through hundreds of MB of short-lived tensors per batch.
// Keeping freed chunks in the heap instead of returning them to the kernel
// avoids re-faulting the same pages every batch. Call once at startup;
// no-op off glibc.
inline void tune_allocator_for_training() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

namespace detail {
inline std::atomic<int>& max_threads_slot() {
  static std::atomic<int> v{0};  // 0 means "use hardware concurrency"
  return v;
}
}  // namespace detail

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

inline void set_max_threads(int n) { detail::max_threads_slot().store(n); }

inline int max_threads() {
  int n = detail::max_threads_slot().load();
  return n <= 0 ? hardware_threads() : n;
}

// Contiguous range partition: f(begin, end) per worker. Used for flat
// memory-bound loops where per-index dispatch would dominate.
template <typename F>
void parallel_for_ranges(std::size_t n, F&& f) {
  if (n == 0) return;
  std::size_t workers = static_cast<std::size_t>(max_threads());
  if (workers > n) workers = n;
  if (workers <= 1) {
    f(std::size_t{0}, n);
    return;
  }
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run_block = [&](std::size_t begin, std::size_t end) {
    try {
      f(begin, end);
    } catch (...) {
      if (!failed.exchange(true)) error = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = begin + chunk < n ? begin + chunk : n;
    if (begin >= end) break;
    pool.emplace_back(run_block, begin, end);
  }
  run_block(0, chunk < n ? chunk : n);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Static block partition of [0, n) across worker threads. Each index is
// processed by exactly one thread, so results never depend on the thread
// count as long as distinct indices write distinct outputs.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  if (n == 0) return;
  std::size_t workers = static_cast<std::size_t>(max_threads());
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run_block = [&](std::size_t begin, std::size_t end) {
    try {
      for (std::size_t i = begin; i < end && !failed.load(std::memory_order_relaxed); ++i) f(i);
    } catch (...) {
      if (!failed.exchange(true)) error = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = begin + chunk < n ? begin + chunk : n;
    if (begin >= end) break;
    pool.emplace_back(run_block, begin, end);
  }
  run_block(0, chunk < n ? chunk : n);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace minisvrt
