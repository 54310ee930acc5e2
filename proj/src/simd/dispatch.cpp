#include "vfa/simd/kernels.hpp"

#include <atomic>
#include <stdexcept>
#include <string>

namespace vfa::simd {

namespace {

std::atomic<int> g_active{-1};

bool cpu_has_avx2() {
#if defined(VFA_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__)) && defined(__GNUC__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
  }
  return "unknown";
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::Scalar;
  if (name == "avx2") return Isa::Avx2;
  if (name == "auto") return best_isa();
  throw std::invalid_argument("unknown instruction set '" + std::string(name) +
                              "' (expected scalar, avx2 or auto)");
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return true;
    case Isa::Avx2: {
      static const bool has = cpu_has_avx2() && detail::avx2_table<float>() != nullptr;
      return has;
    }
  }
  return false;
}

Isa best_isa() { return isa_supported(Isa::Avx2) ? Isa::Avx2 : Isa::Scalar; }

Isa active_isa() {
  int v = g_active.load(std::memory_order_relaxed);
  if (v < 0) {
    v = static_cast<int>(best_isa());
    g_active.store(v, std::memory_order_relaxed);
  }
  return static_cast<Isa>(v);
}

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("instruction set '" + std::string(isa_name(isa)) +
                                "' is not supported on this machine");
  }
  g_active.store(static_cast<int>(isa), std::memory_order_relaxed);
}

template <typename T>
const KernelTable<T>& kernels(Isa isa) {
  if (isa == Isa::Avx2 && isa_supported(Isa::Avx2)) return *detail::avx2_table<T>();
  return detail::scalar_table<T>();
}

template const KernelTable<float>& kernels<float>(Isa);
template const KernelTable<double>& kernels<double>(Isa);

#if !defined(VFA_HAVE_AVX2)
namespace detail {
template <typename T>
const KernelTable<T>* avx2_table() {
  return nullptr;
}
template const KernelTable<float>* avx2_table<float>();
template const KernelTable<double>* avx2_table<double>();
}  // namespace detail
#endif

}  // namespace vfa::simd
