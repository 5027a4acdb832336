#pragma once

#include <cstddef>
#include <functional>

namespace oslsel {

/// Worker count: hardware concurrency, capped by the OSLSEL_THREADS environment
/// variable when it is set to a positive integer.
int default_worker_count();

/// Runs body(i) for i in [0, count) on up to `workers` threads. Indices are
/// handed out dynamically; callers store results by index, so the outcome does
/// not depend on scheduling. The first exception thrown by any body is
/// rethrown after all workers stop.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& body);

}  // namespace oslsel
