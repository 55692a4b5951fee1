#pragma once

#include <cstddef>
#include <functional>

namespace fracimp {

// Resolves a requested worker count; 0 means all available cores.
unsigned resolve_threads(unsigned requested) noexcept;

// Runs body(i) for i in [0, n) on up to `threads` workers. Callers write
// results into slot i so the outcome does not depend on scheduling. If any
// call throws, the exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body);

} // namespace fracimp
