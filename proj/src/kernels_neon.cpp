// NEON kernel variants (aarch64, 2 doubles per vector). Two vector
// accumulators give the same 4-lane stripe order as the scalar reference;
// vmulq/vaddq round separately, matching it bit for bit.

#include <cstddef>
#include <limits>

#if defined(__aarch64__)
#include <arm_neon.h>
#endif

namespace exms::kernels::neon {

#if defined(__aarch64__)

bool compiled() { return true; }

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t prod = vmulq_f64(va, vld1q_f64(x + i));
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void scale(double alpha, double* x, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) x[i] = alpha * x[i];
}

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc01 = vdupq_n_f64(0.0);  // lanes 0,1 of the 4-stripe
  float64x2_t acc23 = vdupq_n_f64(0.0);  // lanes 2,3
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc01 = vaddq_f64(acc01, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    acc23 = vaddq_f64(acc23, vmulq_f64(vld1q_f64(a + i + 2), vld1q_f64(b + i + 2)));
  }
  double lanes[4] = {vgetq_lane_f64(acc01, 0), vgetq_lane_f64(acc01, 1),
                     vgetq_lane_f64(acc23, 0), vgetq_lane_f64(acc23, 1)};
  for (; i < n; ++i) lanes[i & 3] = lanes[i & 3] + a[i] * b[i];
  return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
}

double sum(const double* x, std::size_t n) {
  float64x2_t acc01 = vdupq_n_f64(0.0);
  float64x2_t acc23 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc01 = vaddq_f64(acc01, vld1q_f64(x + i));
    acc23 = vaddq_f64(acc23, vld1q_f64(x + i + 2));
  }
  double lanes[4] = {vgetq_lane_f64(acc01, 0), vgetq_lane_f64(acc01, 1),
                     vgetq_lane_f64(acc23, 0), vgetq_lane_f64(acc23, 1)};
  for (; i < n; ++i) lanes[i & 3] = lanes[i & 3] + x[i];
  return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
}

double max(const double* x, std::size_t n) {
  const double ninf = -std::numeric_limits<double>::infinity();
  float64x2_t m01 = vdupq_n_f64(ninf);
  float64x2_t m23 = vdupq_n_f64(ninf);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    m01 = vmaxq_f64(m01, vld1q_f64(x + i));
    m23 = vmaxq_f64(m23, vld1q_f64(x + i + 2));
  }
  double lanes[4] = {vgetq_lane_f64(m01, 0), vgetq_lane_f64(m01, 1),
                     vgetq_lane_f64(m23, 0), vgetq_lane_f64(m23, 1)};
  for (; i < n; ++i)
    if (x[i] > lanes[i & 3]) lanes[i & 3] = x[i];
  double a = lanes[0] > lanes[1] ? lanes[0] : lanes[1];
  double b = lanes[2] > lanes[3] ? lanes[2] : lanes[3];
  return a > b ? a : b;
}

#else  // !defined(__aarch64__)

bool compiled() { return false; }
void add(const double*, const double*, double*, std::size_t) {}
void sub(const double*, const double*, double*, std::size_t) {}
void mul(const double*, const double*, double*, std::size_t) {}
void axpy(double, const double*, double*, std::size_t) {}
void scale(double, double*, std::size_t) {}
double dot(const double*, const double*, std::size_t) { return 0.0; }
double sum(const double*, std::size_t) { return 0.0; }
double max(const double*, std::size_t) { return 0.0; }

#endif

}  // namespace exms::kernels::neon
