#pragma once

#include <cstddef>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace preflab {

// Execution policy for the batch kernels. Both paths produce bit-identical
// results: per-item work is pure and indexed, and reductions always run in
// the same fixed tree order regardless of thread count. The serial path is
// the reference implementation the parallel one is tested against.
enum class Exec { serial, parallel };

template <typename F>
void parallel_for(std::size_t n, Exec exec, F&& fn) {
#ifdef _OPENMP
  if (exec == Exec::parallel && n > 1) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      fn(static_cast<std::size_t>(i));
    }
    return;
  }
#endif
  (void)exec;
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

namespace detail {
inline double pairwise_sum_range(std::span<const double> xs, std::size_t lo, std::size_t hi) {
  const std::size_t n = hi - lo;
  if (n <= 8) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += xs[i];
    return acc;
  }
  const std::size_t mid = lo + n / 2;
  return pairwise_sum_range(xs, lo, mid) + pairwise_sum_range(xs, mid, hi);
}
}  // namespace detail

// Sum in a fixed tree order determined only by the element count.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return detail::pairwise_sum_range(xs, 0, xs.size());
}

// Reduce items[0..n) into items[0] with a fixed pairwise tree; `add` must
// implement dst += src. The tree shape depends only on n.
template <typename T, typename Add>
void pairwise_reduce(std::vector<T>& items, Add&& add) {
  if (items.empty()) return;
  const auto reduce = [&](auto&& self, std::size_t lo, std::size_t hi) -> std::size_t {
    if (hi - lo == 1) return lo;
    const std::size_t mid = lo + (hi - lo) / 2;
    const std::size_t left = self(self, lo, mid);
    const std::size_t right = self(self, mid, hi);
    add(items[left], items[right]);
    return left;
  };
  reduce(reduce, 0, items.size());
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace preflab
