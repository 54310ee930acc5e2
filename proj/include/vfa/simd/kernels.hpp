#pragma once

// Data-parallel inner loops used by the tensor engine.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2/FMA variant. The variant is chosen once at runtime from CPUID and can
// be overridden with set_isa(). Results of the two paths agree to rounding
// (FMA contraction and a different summation order), never bitwise; within a
// single process the chosen path is fixed, so repeated runs are bitwise
// reproducible.

#include <cstddef>
#include <string_view>

namespace vfa::simd {

enum class Isa { Scalar, Avx2 };

std::string_view isa_name(Isa isa);
Isa parse_isa(std::string_view name);  // "scalar" | "avx2" | "auto"

bool isa_supported(Isa isa);
Isa best_isa();
Isa active_isa();
void set_isa(Isa isa);

template <typename T>
struct KernelTable {
  // C[m,n] += A[m,k] * B[k,n], all row-major with explicit leading dimensions.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
               const T* b, std::size_t ldb, T* c, std::size_t ldc);
  T (*dot)(const T* x, const T* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
};

template <typename T>
const KernelTable<T>& kernels(Isa isa);

template <typename T>
const KernelTable<T>& kernels() {
  return kernels<T>(active_isa());
}

namespace detail {
template <typename T>
const KernelTable<T>& scalar_table();
template <typename T>
const KernelTable<T>* avx2_table();  // nullptr when not compiled in
}  // namespace detail

}  // namespace vfa::simd
