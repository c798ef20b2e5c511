#pragma once
// Data-parallel inner loops used by the tensor engine.
//
// Each kernel has a scalar reference implementation and, on x86-64 with AVX2,
// a vectorized variant selected once at startup. The active variant can be
// forced with the MEDVG_KERNEL environment variable ("scalar" or "avx2").
// Reductions that must be bit-reproducible regardless of the active variant
// (fixed ascending summation order) live in the scalar namespace and are
// called directly where exactness is required.

#include <cstddef>
#include <string>

namespace medvg::kernels {

struct Ops {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);           // y += a*x
  void (*add)(const double*, const double*, double*, std::size_t);     // z = x + y
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);     // z = x .* y
  void (*scale)(double, const double*, double*, std::size_t);          // y = a*x
  const char* name;
};

namespace scalar {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void add(const double* x, const double* y, double* z, std::size_t n);
void sub(const double* x, const double* y, double* z, std::size_t n);
void mul(const double* x, const double* y, double* z, std::size_t n);
void scale(double a, const double* x, double* y, std::size_t n);
// Fixed-order sum, ascending index. Used by conservation-sensitive code.
double sum_ordered(const double* x, std::size_t n);
extern const Ops ops;
}  // namespace scalar

#ifdef MEDVG_HAVE_AVX2
namespace avx2 {
extern const Ops ops;
}
#endif

// Runtime-selected variant (cpuid + env override, resolved once).
const Ops& active();
bool avx2_available();
std::string active_name();

}  // namespace medvg::kernels
