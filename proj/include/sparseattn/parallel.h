#pragma once

#include <cstddef>
#include <functional>

namespace sparseattn {

// Worker cap from SPARSEATTN_LAB_THREADS; 0 or unset means hardware
// concurrency.
std::size_t thread_budget();

// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Callers write
// results into per-index slots and reduce afterwards in index order, so the
// outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace sparseattn
