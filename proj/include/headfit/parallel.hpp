#pragma once

#include <cstddef>
#include <functional>

namespace headfit {

/// Caps the number of worker threads used by parallel_for. Values < 1 reset
/// to hardware concurrency. Thread-safe.
void set_max_threads(int n);

/// Current worker cap.
int max_threads();

/// Runs body(begin, end) over fixed-size chunks of [0, n). Chunk boundaries
/// depend only on n, never on the worker count, so any computation whose
/// chunks write disjoint outputs is bitwise reproducible for every thread
/// count. body must not throw.
void parallel_for_chunks(std::size_t n, std::size_t chunk_size,
                         const std::function<void(std::size_t, std::size_t)>& body);

} // namespace headfit
