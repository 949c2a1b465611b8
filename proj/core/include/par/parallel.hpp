#pragma once

#include <cstddef>
#include <functional>

namespace par {

// Runs fn(i) for i in [0, n) across up to `workers` threads. fn must be safe
// to call concurrently for distinct indices; the first exception thrown by
// any worker is rethrown on the caller. workers <= 1 runs inline.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& fn);

}  // namespace par
