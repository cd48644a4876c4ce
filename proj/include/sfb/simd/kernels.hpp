#pragma once

// Data-parallel inner loops shared by the spectral transforms and the
// exponential integrators. Every kernel has a scalar reference version and,
// where the target supports it, an AVX2+FMA version. The active table is
// chosen once at startup from CPUID and can be forced to the scalar path with
// SFB_SIMD=scalar.

#include <cstddef>
#include <string_view>

namespace sfb::simd {

struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);

  // sum_i w[i] * x[i]^2
  double (*weighted_sq_sum)(const double* w, const double* x, std::size_t n);

  // y = M x for a row-major rows x cols matrix.
  void (*gemv)(const double* m, const double* x, double* y, std::size_t rows,
               std::size_t cols);

  // out[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);

  // out[i] = a[i] * x[i] + b[i] * y[i] + c[i] * z[i]
  void (*lincomb3)(const double* a, const double* x, const double* b,
                   const double* y, const double* c, const double* z,
                   double* out, std::size_t n);

  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_kernels();

// Returns nullptr when the AVX2 variant was not compiled in or the CPU lacks
// AVX2/FMA.
const KernelTable* avx2_kernels();

// The table selected for this process.
const KernelTable& active();

}  // namespace sfb::simd
