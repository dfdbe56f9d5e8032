#pragma once
// Index-parallel loop. Work items must be independent; results are written
// by index, so output never depends on scheduling.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dfid {

inline std::size_t resolve_threads(int requested) {
    if (requested > 0) return static_cast<std::size_t>(requested);
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// The first exception thrown by any item is rethrown after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const std::size_t workers = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (!first) first = std::current_exception();
                        next = n;
                    }
                }
            });
        }
    }
    if (first) std::rethrow_exception(first);
}

}  // namespace dfid
