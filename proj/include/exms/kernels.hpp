#pragma once

#include <cstddef>

namespace exms::kernels {

// Data-parallel primitives behind the tensor ops. Every ISA variant is
// bit-identical to the scalar reference:
//   - elementwise kernels evaluate the same expression per lane,
//   - reductions stripe the input over 4 accumulators (index mod 4) and
//     combine them as (a0 + a1) + (a2 + a3),
//   - no FMA contraction anywhere (mul and add round separately).
// Training therefore produces byte-identical checkpoints regardless of the
// selected variant.
enum class Isa { Scalar, Avx2, Neon };

const char* isa_name(Isa isa);
bool isa_supported(Isa isa);

// Best supported variant, overridable with EXMS_KERNELS=scalar|avx2|neon.
Isa active_isa();
// Force a variant (tests use this to cross-check). Throws ConfigError if the
// variant is not supported on this machine.
void set_isa(Isa isa);

void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);
// x *= alpha
void scale(double alpha, double* x, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);
double sum(const double* x, std::size_t n);
// n >= 1; inputs must be NaN-free.
double max(const double* x, std::size_t n);

}  // namespace exms::kernels
