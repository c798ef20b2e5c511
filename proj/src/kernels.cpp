#include "medvg/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace medvg::kernels {

namespace scalar {

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void add(const double* x, const double* y, double* z, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

void sub(const double* x, const double* y, double* z, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] - y[i];
}

void mul(const double* x, const double* y, double* z, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

void scale(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

double sum_ordered(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

const Ops ops = {dot, axpy, add, sub, mul, scale, "scalar"};

}  // namespace scalar

bool avx2_available() {
#ifdef MEDVG_HAVE_AVX2
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

static const Ops& resolve() {
  const char* force = std::getenv("MEDVG_KERNEL");
  if (force != nullptr && std::strcmp(force, "scalar") == 0) return scalar::ops;
#ifdef MEDVG_HAVE_AVX2
  if (force != nullptr && std::strcmp(force, "avx2") == 0) return avx2::ops;
  if (force == nullptr && avx2_available()) return avx2::ops;
#endif
  return scalar::ops;
}

const Ops& active() {
  static const Ops& ops = resolve();
  return ops;
}

std::string active_name() { return active().name; }

}  // namespace medvg::kernels
