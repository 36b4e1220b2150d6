#pragma once

#include <cstddef>
#include <functional>

namespace tpu {

/// Worker count: TPU_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs body(i) for i in [0, n) on up to `threads` workers. Indices are handed
/// out dynamically; the first exception thrown by any task is rethrown after
/// all workers have joined.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace tpu
