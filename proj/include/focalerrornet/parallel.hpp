#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fen {

/// Runs f(i, w) for i in [0, n) on up to `workers` threads, where w < workers
/// identifies the calling thread (for per-thread scratch such as model
/// replicas). Items are claimed dynamically, so f must write only to slot i
/// of pre-sized outputs; the results are then independent of scheduling.
/// The first exception thrown by any item is rethrown after all threads join.
template <typename F>
void parallel_for_indexed(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0});
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&](std::size_t w) {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i, w);
      } catch (...) {
        const std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run, t);
    run(0);
  }
  if (error) std::rethrow_exception(error);
}

/// parallel_for_indexed without the worker index.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  parallel_for_indexed(n, workers, [&](std::size_t i, std::size_t) { f(i); });
}

}  // namespace fen
