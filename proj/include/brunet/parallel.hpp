#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace brunet {

/// Worker-thread cap: BRUNET_THREADS when set to a positive integer, else the machine's parallelism.
inline int thread_cap() {
  static const int cap = [] {
    if (const char* env = std::getenv("BRUNET_THREADS")) {
      try {
        const int n = std::stoi(env);
        if (n > 0) return n;
      } catch (...) {
      }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cap;
}

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs, so the
/// result does not depend on the thread count. Nested calls run serially.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
#ifdef _OPENMP
  const bool worth_it = n > 1 && n * work_per_item >= (std::size_t{1} << 15) && thread_cap() > 1 &&
                        !omp_in_parallel();
  if (worth_it) {
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
    return;
  }
#else
  (void)work_per_item;
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace brunet
