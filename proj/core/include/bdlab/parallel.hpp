#pragma once

#include <cstddef>
#include <functional>

namespace bdlab {

// Worker count from BDLAB_WORKERS (positive integer), else the hardware
// concurrency, else 1.
std::size_t worker_count();

// Runs job(i) for i in [0, n) on up to worker_count() threads. Callers write
// results into slot i, so merges are deterministic by job index. The first
// exception (lowest index) is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job);

} // namespace bdlab
