#pragma once

// Thread control and deterministic reductions.
//
// Every parallel loop in the library writes disjoint outputs, and every
// reduction sums fixed-size chunks in index order, so results do not depend on
// the number of threads.

#include <cstddef>
#include <cstdlib>
#include <span>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace poredit {

inline int num_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_num_threads(int n) {
#if defined(_OPENMP)
  omp_set_num_threads(n < 1 ? 1 : n);
#else
  (void)n;
#endif
}

/// Thread count from POREDIT_THREADS, or 1 when unset or unparsable.
inline int threads_from_env() {
  const char* env = std::getenv("POREDIT_THREADS");
  if (env == nullptr) return 1;
  try {
    int n = std::stoi(env);
    return n < 1 ? 1 : n;
  } catch (...) {
    return 1;
  }
}

// Work below this many scalar operations runs serially.
inline constexpr std::size_t kParallelGrain = 1u << 15;

template <class Fn>
void parallel_for(std::size_t n, std::size_t cost_per_item, Fn&& fn) {
  const long long count = static_cast<long long>(n);
#if defined(_OPENMP)
  const bool go_parallel = n * cost_per_item >= kParallelGrain && num_threads() > 1;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
#else
  (void)cost_per_item;
  for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
#endif
}

inline constexpr std::size_t kReduceChunk = 4096;

/// Sum of f(i) for i in [0, n) in double precision. Chunk partials are formed
/// in parallel and combined in chunk order.
template <class Fn>
double deterministic_sum(std::size_t n, Fn&& f) {
  const std::size_t chunks = (n + kReduceChunk - 1) / kReduceChunk;
  if (chunks <= 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(f(i));
    return s;
  }
  std::vector<double> partial(chunks, 0.0);
  parallel_for(chunks, kReduceChunk, [&](std::size_t c) {
    const std::size_t lo = c * kReduceChunk;
    const std::size_t hi = lo + kReduceChunk < n ? lo + kReduceChunk : n;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += static_cast<double>(f(i));
    partial[c] = s;
  });
  double s = 0.0;
  for (double p : partial) s += p;
  return s;
}

template <class T>
double deterministic_sum(std::span<const T> values) {
  return deterministic_sum(values.size(), [&](std::size_t i) { return values[i]; });
}

}  // namespace poredit
