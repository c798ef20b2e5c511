// Scalar reference kernels against hand-written loops, and the vectorized
// variant against the scalar reference across sizes that exercise tails.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "medvg/kernels.hpp"
#include "medvg/rng.hpp"

using namespace medvg;

namespace {
std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return v;
}
}  // namespace

TEST_CASE("scalar kernels match naive loops") {
  Rng rng(101);
  for (std::size_t n : {1u, 3u, 8u, 17u, 64u, 1000u}) {
    auto x = random_vec(rng, n), y = random_vec(rng, n);
    double naive_dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) naive_dot += x[i] * y[i];
    CHECK(kernels::scalar::dot(x.data(), y.data(), n) == doctest::Approx(naive_dot).epsilon(1e-14));

    std::vector<double> z(n);
    kernels::scalar::add(x.data(), y.data(), z.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(z[i] == x[i] + y[i]);
    kernels::scalar::mul(x.data(), y.data(), z.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(z[i] == x[i] * y[i]);

    std::vector<double> acc = y;
    kernels::scalar::axpy(0.5, x.data(), acc.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(acc[i] == doctest::Approx(y[i] + 0.5 * x[i]));
  }
}

TEST_CASE("sum_ordered is the plain ascending accumulation") {
  Rng rng(102);
  auto x = random_vec(rng, 257);
  double acc = 0.0;
  for (double v : x) acc += v;
  CHECK(kernels::scalar::sum_ordered(x.data(), x.size()) == acc);  // bitwise
}

#ifdef MEDVG_HAVE_AVX2
TEST_CASE("avx2 kernels are equivalent to the scalar reference") {
  if (!kernels::avx2_available()) return;
  Rng rng(103);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 1 + rng.uniform_int(200);  // includes non-multiples of 4
    auto x = random_vec(rng, n), y = random_vec(rng, n);

    double ds = kernels::scalar::ops.dot(x.data(), y.data(), n);
    double dv = kernels::avx2::ops.dot(x.data(), y.data(), n);
    CHECK(std::fabs(ds - dv) <= 1e-10 * (1.0 + std::fabs(ds)));

    std::vector<double> zs(n), zv(n);
    kernels::scalar::ops.add(x.data(), y.data(), zs.data(), n);
    kernels::avx2::ops.add(x.data(), y.data(), zv.data(), n);
    CHECK(zs == zv);
    kernels::scalar::ops.sub(x.data(), y.data(), zs.data(), n);
    kernels::avx2::ops.sub(x.data(), y.data(), zv.data(), n);
    CHECK(zs == zv);
    kernels::scalar::ops.mul(x.data(), y.data(), zs.data(), n);
    kernels::avx2::ops.mul(x.data(), y.data(), zv.data(), n);
    CHECK(zs == zv);
    kernels::scalar::ops.scale(1.7, x.data(), zs.data(), n);
    kernels::avx2::ops.scale(1.7, x.data(), zv.data(), n);
    CHECK(zs == zv);

    std::vector<double> as = y, av = y;
    kernels::scalar::ops.axpy(-0.3, x.data(), as.data(), n);
    kernels::avx2::ops.axpy(-0.3, x.data(), av.data(), n);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(std::fabs(as[i] - av[i]) <= 1e-12 * (1.0 + std::fabs(as[i])));
  }
}
#endif

TEST_CASE("active variant is resolved and named") {
  const kernels::Ops& ops = kernels::active();
  CHECK(ops.dot != nullptr);
  std::string name = kernels::active_name();
  CHECK((name == "scalar" || name == "avx2"));
}
