#include "exms/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <limits>
#include <string>

#include "exms/errors.hpp"

namespace exms::kernels {

// ---------------------------------------------------------------------------
// Scalar reference. The striped accumulation order here is the contract the
// SIMD variants reproduce exactly.
// ---------------------------------------------------------------------------
namespace scalar {

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void scale(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = alpha * x[i];
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] = acc[0] + a[i + 0] * b[i + 0];
    acc[1] = acc[1] + a[i + 1] * b[i + 1];
    acc[2] = acc[2] + a[i + 2] * b[i + 2];
    acc[3] = acc[3] + a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) acc[i & 3] = acc[i & 3] + a[i] * b[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

double sum(const double* x, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] = acc[0] + x[i + 0];
    acc[1] = acc[1] + x[i + 1];
    acc[2] = acc[2] + x[i + 2];
    acc[3] = acc[3] + x[i + 3];
  }
  for (; i < n; ++i) acc[i & 3] = acc[i & 3] + x[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

double max(const double* x, std::size_t n) {
  double m[4];
  m[0] = m[1] = m[2] = m[3] = -std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    if (x[i + 0] > m[0]) m[0] = x[i + 0];
    if (x[i + 1] > m[1]) m[1] = x[i + 1];
    if (x[i + 2] > m[2]) m[2] = x[i + 2];
    if (x[i + 3] > m[3]) m[3] = x[i + 3];
  }
  for (; i < n; ++i)
    if (x[i] > m[i & 3]) m[i & 3] = x[i];
  double m01 = m[0] > m[1] ? m[0] : m[1];
  double m23 = m[2] > m[3] ? m[2] : m[3];
  return m01 > m23 ? m01 : m23;
}

}  // namespace scalar

// Variant entry points defined in kernels_avx2.cpp / kernels_neon.cpp.
namespace avx2 {
bool compiled();
void add(const double*, const double*, double*, std::size_t);
void sub(const double*, const double*, double*, std::size_t);
void mul(const double*, const double*, double*, std::size_t);
void axpy(double, const double*, double*, std::size_t);
void scale(double, double*, std::size_t);
double dot(const double*, const double*, std::size_t);
double sum(const double*, std::size_t);
double max(const double*, std::size_t);
}  // namespace avx2

namespace neon {
bool compiled();
void add(const double*, const double*, double*, std::size_t);
void sub(const double*, const double*, double*, std::size_t);
void mul(const double*, const double*, double*, std::size_t);
void axpy(double, const double*, double*, std::size_t);
void scale(double, double*, std::size_t);
double dot(const double*, const double*, std::size_t);
double sum(const double*, std::size_t);
double max(const double*, std::size_t);
}  // namespace neon

namespace {

struct KernelTable {
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scale)(double, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*sum)(const double*, std::size_t);
  double (*max)(const double*, std::size_t);
};

constexpr KernelTable kScalarTable = {scalar::add, scalar::sub, scalar::mul, scalar::axpy,
                                      scalar::scale, scalar::dot, scalar::sum, scalar::max};
constexpr KernelTable kAvx2Table = {avx2::add, avx2::sub, avx2::mul, avx2::axpy,
                                    avx2::scale, avx2::dot, avx2::sum, avx2::max};
constexpr KernelTable kNeonTable = {neon::add, neon::sub, neon::mul, neon::axpy,
                                    neon::scale, neon::dot, neon::sum, neon::max};

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa detect_isa() {
  if (const char* env = std::getenv("EXMS_KERNELS")) {
    std::string want(env);
    Isa isa;
    if (want == "scalar") isa = Isa::Scalar;
    else if (want == "avx2") isa = Isa::Avx2;
    else if (want == "neon") isa = Isa::Neon;
    else raise(Errc::ConfigError, "EXMS_KERNELS must be scalar, avx2 or neon (got '" + want + "')");
    require(isa_supported(isa), Errc::ConfigError,
            std::string("EXMS_KERNELS requests unsupported variant '") + want + "'");
    return isa;
  }
  if (isa_supported(Isa::Avx2)) return Isa::Avx2;
  if (isa_supported(Isa::Neon)) return Isa::Neon;
  return Isa::Scalar;
}

Isa g_isa = Isa::Scalar;
const KernelTable* g_table = &kScalarTable;
bool g_initialized = false;

void apply_isa(Isa isa) {
  g_isa = isa;
  switch (isa) {
    case Isa::Scalar: g_table = &kScalarTable; break;
    case Isa::Avx2: g_table = &kAvx2Table; break;
    case Isa::Neon: g_table = &kNeonTable; break;
  }
  g_initialized = true;
}

const KernelTable& table() {
  if (!g_initialized) apply_isa(detect_isa());
  return *g_table;
}

}  // namespace

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Neon: return "neon";
  }
  return "?";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return true;
    case Isa::Avx2: return avx2::compiled() && cpu_has_avx2();
    case Isa::Neon: return neon::compiled();
  }
  return false;
}

Isa active_isa() {
  table();
  return g_isa;
}

void set_isa(Isa isa) {
  require(isa_supported(isa), Errc::ConfigError,
          std::string("kernel variant not supported on this machine: ") + isa_name(isa));
  apply_isa(isa);
}

void add(const double* a, const double* b, double* out, std::size_t n) { table().add(a, b, out, n); }
void sub(const double* a, const double* b, double* out, std::size_t n) { table().sub(a, b, out, n); }
void mul(const double* a, const double* b, double* out, std::size_t n) { table().mul(a, b, out, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) { table().axpy(alpha, x, y, n); }
void scale(double alpha, double* x, std::size_t n) { table().scale(alpha, x, n); }
double dot(const double* a, const double* b, std::size_t n) { return table().dot(a, b, n); }
double sum(const double* x, std::size_t n) { return table().sum(x, n); }
double max(const double* x, std::size_t n) { return table().max(x, n); }

}  // namespace exms::kernels
