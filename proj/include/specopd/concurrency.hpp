// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "specopd/common.hpp"

namespace specopd {

/// Worker count: SPECOPD_THREADS env override, otherwise hardware concurrency
/// clamped to 8.
inline int default_workers() {
    if (const char* env = std::getenv("SPECOPD_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) {
            return n;
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(hw == 0 ? 1u : hw, 8u));
}

/// Runs f(i) for i in [0, n) across workers. Results must be written into
/// index-addressed slots by the caller, which makes the merge order
/// deterministic regardless of the worker count. Exceptions are rethrown
/// on the calling thread.
template <typename F>
void parallel_for_ordered(int n, F&& f, int workers = default_workers()) {
    if (n <= 0) {
        return;
    }
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int i = w; i < n; i += workers) {
                    f(i);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) {
                    error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

} // namespace specopd
