#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "exms/errors.hpp"
#include "exms/kernels.hpp"
#include "exms/rng.hpp"

using namespace exms;

namespace {

struct IsaGuard {
  kernels::Isa prev;
  IsaGuard() : prev(kernels::active_isa()) {}
  ~IsaGuard() { kernels::set_isa(prev); }
};

std::vector<double> random_vec(CounterRng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.next_normal() * 3.0;
  return v;
}

bool bits_equal(double a, double b) {
  return std::memcmp(&a, &b, sizeof(double)) == 0;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

}  // namespace

TEST_CASE("scalar reductions use the documented striped order") {
  IsaGuard guard;
  kernels::set_isa(kernels::Isa::Scalar);
  CounterRng rng(11);
  const std::size_t n = 23;
  std::vector<double> x = random_vec(rng, n);
  std::vector<double> y = random_vec(rng, n);

  double acc[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) acc[i % 4] += x[i];
  CHECK(bits_equal(kernels::sum(x.data(), n), (acc[0] + acc[1]) + (acc[2] + acc[3])));

  double dacc[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) dacc[i % 4] += x[i] * y[i];
  CHECK(bits_equal(kernels::dot(x.data(), y.data(), n), (dacc[0] + dacc[1]) + (dacc[2] + dacc[3])));

  double m[4] = {-INFINITY, -INFINITY, -INFINITY, -INFINITY};
  for (std::size_t i = 0; i < n; ++i) m[i % 4] = std::max(m[i % 4], x[i]);
  CHECK(bits_equal(kernels::max(x.data(), n), std::max(std::max(m[0], m[1]), std::max(m[2], m[3]))));
}

TEST_CASE("simd variants are bit-identical to the scalar reference") {
  IsaGuard guard;
  std::vector<kernels::Isa> variants;
  for (kernels::Isa isa : {kernels::Isa::Avx2, kernels::Isa::Neon}) {
    if (kernels::isa_supported(isa)) variants.push_back(isa);
  }
  if (variants.empty()) {
    MESSAGE("no SIMD variant supported on this machine; scalar-only");
    return;
  }

  CounterRng rng(7);
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 5u, 7u, 8u, 13u, 16u, 17u, 31u, 32u, 33u, 64u, 67u}) {
    std::vector<double> a = random_vec(rng, n);
    std::vector<double> b = random_vec(rng, n);
    const double alpha = rng.next_normal();

    kernels::set_isa(kernels::Isa::Scalar);
    std::vector<double> add_s(n), sub_s(n), mul_s(n), axpy_s(b), scale_s(a);
    kernels::add(a.data(), b.data(), add_s.data(), n);
    kernels::sub(a.data(), b.data(), sub_s.data(), n);
    kernels::mul(a.data(), b.data(), mul_s.data(), n);
    kernels::axpy(alpha, a.data(), axpy_s.data(), n);
    kernels::scale(alpha, scale_s.data(), n);
    const double dot_s = kernels::dot(a.data(), b.data(), n);
    const double sum_s = kernels::sum(a.data(), n);
    const double max_s = n ? kernels::max(a.data(), n) : 0.0;

    for (kernels::Isa isa : variants) {
      CAPTURE(n);
      CAPTURE(kernels::isa_name(isa));
      kernels::set_isa(isa);
      std::vector<double> add_v(n), sub_v(n), mul_v(n), axpy_v(b), scale_v(a);
      kernels::add(a.data(), b.data(), add_v.data(), n);
      kernels::sub(a.data(), b.data(), sub_v.data(), n);
      kernels::mul(a.data(), b.data(), mul_v.data(), n);
      kernels::axpy(alpha, a.data(), axpy_v.data(), n);
      kernels::scale(alpha, scale_v.data(), n);
      CHECK(bits_equal(add_s, add_v));
      CHECK(bits_equal(sub_s, sub_v));
      CHECK(bits_equal(mul_s, mul_v));
      CHECK(bits_equal(axpy_s, axpy_v));
      CHECK(bits_equal(scale_s, scale_v));
      CHECK(bits_equal(dot_s, kernels::dot(a.data(), b.data(), n)));
      CHECK(bits_equal(sum_s, kernels::sum(a.data(), n)));
      if (n) CHECK(bits_equal(max_s, kernels::max(a.data(), n)));
    }
  }
}

TEST_CASE("set_isa rejects unsupported variants") {
  bool any_unsupported = false;
  for (kernels::Isa isa : {kernels::Isa::Avx2, kernels::Isa::Neon}) {
    if (!kernels::isa_supported(isa)) {
      any_unsupported = true;
      CHECK_THROWS_AS(kernels::set_isa(isa), Error);
    }
  }
  if (!any_unsupported) MESSAGE("all variants supported here");
  CHECK(kernels::isa_supported(kernels::Isa::Scalar));
}

TEST_CASE("counter rng is stateless in its counter") {
  CounterRng a(42);
  CounterRng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  CounterRng c(43);
  bool differs = false;
  CounterRng a2(42);
  for (int i = 0; i < 10; ++i) differs |= (a2.next_u64() != c.next_u64());
  CHECK(differs);
}

TEST_CASE("derive_seed decorrelates stream indices") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(123, 7) == derive_seed(123, 7));
}

TEST_CASE("uniform and bounded draws stay in range") {
  CounterRng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.next_uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    CHECK(rng.next_below(7) < 7);
  }
  CHECK(rng.next_below(1) == 0);
}

TEST_CASE("normal draws have roughly standard moments") {
  CounterRng rng(9);
  const int n = 20000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.next_normal();
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}
