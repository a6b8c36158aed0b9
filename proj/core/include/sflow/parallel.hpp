#pragma once

#include <functional>

namespace sflow {

/// Caps the worker pool used by the chunked loops below; n <= 0 restores the
/// hardware default.
void set_worker_threads(int n);
int worker_threads();

/// Runs fn(i) for i in [0, n) over disjoint index chunks. Callers keep writes
/// disjoint per index, so results do not depend on the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace sflow
