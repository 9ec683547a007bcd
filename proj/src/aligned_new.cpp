// Global 64-byte-aligned allocation. Vectorized kernels (Eigen and compiler
// auto-vectorization) peel loop heads based on pointer alignment; with plain
// malloc two identical buffers can land on different 32-byte phases and sum in
// different orders, breaking bit-reproducibility. Fixing every allocation to
// one cache-line phase makes every run identical for a given seed.

#include <cstdlib>
#include <new>

namespace {

constexpr std::size_t kAlign = 64;

void* aligned_alloc_checked(std::size_t size) {
    if (size == 0) size = 1;
    std::size_t rounded = (size + kAlign - 1) & ~(kAlign - 1);
    void* p = std::aligned_alloc(kAlign, rounded);
    return p;
}

}  // namespace

void* operator new(std::size_t size) {
    void* p = aligned_alloc_checked(size);
    if (!p) throw std::bad_alloc();
    return p;
}

void* operator new[](std::size_t size) { return ::operator new(size); }

void* operator new(std::size_t size, const std::nothrow_t&) noexcept {
    return aligned_alloc_checked(size);
}

void* operator new[](std::size_t size, const std::nothrow_t&) noexcept {
    return aligned_alloc_checked(size);
}

void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
