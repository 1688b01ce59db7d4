#pragma once

#include <cstddef>
#include <functional>

namespace echotrack {

/// Worker count used by the forward/backward kernels. Defaults to the value of
/// ECHOTRACK_THREADS when set, otherwise the hardware concurrency.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Deterministic mode pins kernels to a single worker. Kernels only ever split
/// work over independent output elements, so results do not depend on the
/// worker count; the flag additionally removes any scheduling variation.
bool deterministic();
void set_deterministic(bool flag);

/// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is handled
/// by exactly one worker.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t min_chunk = 1);

}  // namespace echotrack
