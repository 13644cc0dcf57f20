#pragma once

#include <cstdint>
#include <functional>

namespace mcsagan {

/// Worker thread cap. Read once from MCSAGAN_THREADS, overridable.
int thread_count();
void set_thread_count(int n);

/// Runs body(i) for i in [0, n). Work is split into contiguous static blocks
/// so each index is computed by exactly the same instruction sequence
/// regardless of the thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace mcsagan
