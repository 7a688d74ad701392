#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pic {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

template <class... Args>
[[noreturn]] inline void fail_shape(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw ShapeError(os.str());
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Global worker count. 0 = hardware concurrency, 1 = strictly sequential.
// Parallelism is only ever applied across independent output elements, so
// results are bit-identical for every thread count.
inline int& thread_setting() {
    static int n = 1;
    return n;
}

inline void set_threads(int n) { thread_setting() = n; }

inline int effective_threads() {
    int n = thread_setting();
    if (n <= 0) {
        unsigned hw = std::thread::hardware_concurrency();
        n = hw ? static_cast<int>(hw) : 1;
    }
    return n;
}

// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is
// processed by exactly one worker; chunk boundaries do not affect values.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    int workers = effective_threads();
    if (workers <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    std::size_t chunk = (n + k - 1) / k;
    std::vector<std::thread> pool;
    pool.reserve(k);
    for (std::size_t t = 0; t < k; ++t) {
        std::size_t lo = t * chunk;
        std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace pic
