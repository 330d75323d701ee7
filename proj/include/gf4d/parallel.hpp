// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gf4d {

/// Worker cap: min(hardware, GF4D_THREADS). At least 1.
inline int worker_count() {
    int n = int(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("GF4D_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0) n = std::min(n, cap);
    }
    return n;
}

/// Runs fn(i) for i in [0, count). Each index runs exactly once; results must
/// not depend on the thread that executed them (callers write disjoint slots).
inline void parallel_for(int count, const std::function<void(int)>& fn) {
    int workers = std::min(worker_count(), count);
    if (workers <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int i = w; i < count; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace gf4d
