#pragma once

#include <cstddef>
#include <functional>

namespace dreamscene {

/// Resolves a worker request: 0 means one worker per logical processor.
int resolve_workers(int requested);

/// Runs body(i) for i in [0, count) on up to `workers` threads. Work items are
/// claimed dynamically, so bodies must write only to item-private state.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& body);

} // namespace dreamscene
