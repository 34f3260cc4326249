#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace zsdfa {

/// Effective worker count honoring ZSDFA_DETERMINISTIC=1 (forces 1) and an
/// optional explicit request (0 = hardware concurrency).
inline int effective_threads(int requested = 0) {
    const char* det = std::getenv("ZSDFA_DETERMINISTIC");
    if (det && det[0] == '1') return 1;
    if (requested > 0) return requested;
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must be
/// independent; each item is processed by exactly one worker, so per-item
/// results are identical to the serial schedule.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    int workers = std::min<std::size_t>(std::max(threads, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace zsdfa
