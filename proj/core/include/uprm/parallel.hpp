#pragma once

#include <cstddef>
#include <functional>

namespace uprm {

/// UPRM_THREADS when set to a positive integer, otherwise the hardware
/// concurrency (at least 1).
std::size_t default_thread_count();

/// Calls `fn(i)` for i in [0, count) on up to `threads` workers (0 means
/// default_thread_count()). The first exception thrown by any call is
/// rethrown after all workers stop.
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace uprm
