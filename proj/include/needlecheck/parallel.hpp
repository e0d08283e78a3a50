#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace needlecheck {

/// Fixed-size block partition of a path range. Blocks are independent of the
/// worker count, so per-block results can be reduced in block order and the
/// totals do not depend on how many threads ran.
constexpr int kPathBlock = 2048;

inline int block_count(int total) { return (total + kPathBlock - 1) / kPathBlock; }

/// fn(block_index, begin, end) is called once per block, possibly from
/// several threads. Exceptions are captured and rethrown on the caller.
template <class Fn>
void parallel_for_blocks(int total, Fn&& fn, int max_threads = 0) {
    const int blocks = block_count(total);
    int workers = max_threads > 0 ? max_threads : static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    if (workers > blocks) workers = blocks;

    if (workers <= 1) {
        for (int b = 0; b < blocks; ++b) {
            const int begin = b * kPathBlock;
            const int end = std::min(total, begin + kPathBlock);
            fn(b, begin, end);
        }
        return;
    }

    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&]() {
        while (true) {
            const int b = next.fetch_add(1);
            if (b >= blocks) return;
            const int begin = b * kPathBlock;
            const int end = std::min(total, begin + kPathBlock);
            try {
                fn(b, begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace needlecheck
