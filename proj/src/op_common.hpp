#pragma once

#include <cstdint>
#include <vector>

#include "exms/tensor.hpp"

// Shared between the op translation units (ops.cpp, rope.cpp, attention.cpp).
namespace exms::detail {

void check_finite_array(const double* p, int64_t n, const char* what);

// Row-major matmul helpers on raw buffers. All assign into c.
// c[m,n] = a[m,k] * b[k,n]            (axpy accumulation over rows)
void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] = a[m,k] * b[n,k]^T          (dot products)
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[k,n] = a[m,k]^T * b[m,n]          (axpy accumulation over columns of a)
void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// p[i] = exp(x[i] - max x) / sum, written into p; returns log-sum-exp.
double softmax_row(const double* x, double* p, int64_t n);

}  // namespace exms::detail
