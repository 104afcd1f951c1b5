#pragma once

// Process-level settings for the executables.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hdl {

/// Keeps large activation buffers on the heap instead of fresh mmap regions,
/// which otherwise page-fault on every training step. No-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace hdl
