#pragma once

// Deterministic data parallelism. Work items are independent; results are
// combined afterwards in index order, so the outcome does not depend on the
// thread count. ADL_THREADS caps the pool (1 disables threading).

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace lumen {

inline int max_threads() {
    static const int cap = [] {
        const char* env = std::getenv("ADL_THREADS");
        const int hw = static_cast<int>(std::thread::hardware_concurrency());
        int n = hw > 0 ? hw : 1;
        if (env) {
            try {
                n = std::min(n, std::max(1, std::stoi(env)));
            } catch (...) {
                n = 1;
            }
        }
        return n;
    }();
    return cap;
}

// fn(i) for i in [0, n); blocks until done
template <typename F>
void parallel_for(std::size_t n, F&& fn, int threads = 0) {
    if (threads <= 0) threads = max_threads();
    threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = static_cast<std::size_t>(w); i < n;
                 i += static_cast<std::size_t>(threads))
                fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace lumen
