#pragma once

#include <cstdint>
#include <functional>

namespace dowser {

// Worker count: DOWSER_THREADS caps it, hardware concurrency is the default.
int thread_budget();

// Runs fn(i) for i in [0, n) on up to thread_budget() workers. Indices are
// statically partitioned, so writes keyed by index are race-free and any
// index-ordered reduction of the results is deterministic.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace dowser
