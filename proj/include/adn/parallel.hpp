#pragma once

#include <cstddef>
#include <functional>

namespace adn {

// Worker count used by parallel_for. Initialized from ADN_THREADS
// (0 or unset = all cores).
std::size_t thread_count();
void set_thread_count(std::size_t n);  // 0 = all cores

// Re-reads ADN_THREADS from the environment.
void reset_thread_count_from_env();

// Runs body(begin, end) over contiguous chunks of [0, n). Chunks never split an
// index, so per-index work is identical for every worker count. Calls made from
// inside a running parallel_for execute serially on the calling thread.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace adn
