#include "lofi/common.hpp"

#include <atomic>
#include <cstdlib>

namespace lofi {

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

int num_threads() {
    static int n = [] {
        if (const char* env = std::getenv("LOFI_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1 && v <= 64) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        if (hw == 0) hw = 1;
        if (hw > 16) hw = 16;
        return static_cast<int>(hw);
    }();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    int t = num_threads();
    if (t == 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (static_cast<int64_t>(t) > n) t = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(t));
    for (int w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            int64_t lo = n * w / t;
            int64_t hi = n * (w + 1) / t;
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace lofi
