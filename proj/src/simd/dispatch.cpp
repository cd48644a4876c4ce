#include <cstdlib>
#include <string_view>

#include "sfb/simd/kernels.hpp"

namespace sfb::simd {

#if defined(SFB_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

namespace {

bool avx2_supported() {
#if defined(SFB_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& select() {
  if (const char* env = std::getenv("SFB_SIMD"); env && std::string_view(env) == "scalar")
    return scalar_kernels();
  if (const KernelTable* t = avx2_kernels()) return *t;
  return scalar_kernels();
}

}  // namespace

const KernelTable* avx2_kernels() {
#if defined(SFB_HAVE_AVX2)
  static const bool ok = avx2_supported();
  return ok ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace sfb::simd
