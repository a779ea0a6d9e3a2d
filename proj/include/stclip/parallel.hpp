#pragma once

#include <cstddef>
#include <functional>

namespace stclip {

// --threads value, else STCLIP_THREADS, else the hardware concurrency.
// Zero means "unset" at every level.
std::size_t resolve_threads(std::size_t requested = 0);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Items are claimed
// dynamically, so fn must only write to per-item state. The first exception
// thrown by any item is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace stclip
