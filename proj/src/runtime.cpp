#include "isslab/runtime.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace isslab {

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc ceiling on 64-bit
#endif
}

}  // namespace isslab
