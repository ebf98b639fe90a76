#pragma once

#include <functional>

namespace morphtrack {

/// Intra-op thread cap from MORPHTRACK_THREADS (default 1, the bit-stable
/// baseline). Read once per process.
int max_threads();

/// Runs fn(begin,end) over a contiguous partition of [0,n). With one thread
/// this is a plain call; partitions never overlap, so ops that write disjoint
/// ranges stay bit-identical at any thread count.
void parallel_for(int n, const std::function<void(int, int)>& fn);

}  // namespace morphtrack
