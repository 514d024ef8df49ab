#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace nerveseg {

namespace detail {
inline std::atomic<int>& thread_count() {
    static std::atomic<int> n{1};
    return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_count().load(); }

inline void set_num_threads(int n) { detail::thread_count().store(n < 1 ? 1 : n); }

/// Splits [0, count) into one contiguous chunk per worker and joins.
/// Every index is processed by exactly one worker, so any kernel that
/// writes disjoint outputs per index produces bit-identical results for
/// every thread count.
inline void parallel_for(int64_t count, const std::function<void(int64_t, int64_t)>& fn) {
    const int nt = num_threads();
    if (nt <= 1 || count <= 1) {
        fn(0, count);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(nt, count));
    const int64_t chunk = (count + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min<int64_t>(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace nerveseg
