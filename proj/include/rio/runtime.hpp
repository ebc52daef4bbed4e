#pragma once

// Process-level tuning for the executables.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rio {

/// Keeps large tape buffers on the heap instead of fresh mmap regions, which
/// otherwise page-fault on every forward pass.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace rio
