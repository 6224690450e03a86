#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace caap {

/// Runs fn(begin, end) over contiguous chunks of [0, n). Each index lands in
/// exactly one chunk; callers write results into per-index slots so the output
/// does not depend on the thread count.
template <typename Fn>
void parallel_chunks(int n, int threads, Fn&& fn) {
  if (n <= 0) return;
  const int workers = std::clamp(threads, 1, n);
  if (workers == 1) {
    fn(0, n);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const int base = n / workers;
  const int extra = n % workers;
  int begin = 0;
  for (int w = 0; w < workers; ++w) {
    const int end = begin + base + (w < extra ? 1 : 0);
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  parallel_chunks(n, threads, [&](int begin, int end) {
    for (int i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace caap
