#pragma once

#include <cstddef>
#include <functional>

namespace ctok {

/// Upper bound on worker threads used by internal loops. 1 disables threading.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunks never share output
/// indices, so results do not depend on the thread count as long as each index's work
/// is itself sequential. Runs inline when n < min_chunk or threading is off.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace ctok
