// SPDX-License-Identifier: Apache-2.0
// NEON variants, one complex double per 128-bit register. NEON is baseline on
// aarch64 so this file needs no special flags; it is only added to the build
// there.
#include "mlfl/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

#include "kernels_detail.hpp"

namespace mlfl::kernels::neon {
namespace {

const double* dp(const cxd* p) { return reinterpret_cast<const double*>(p); }
double* dp(cxd* p) { return reinterpret_cast<double*>(p); }

// [ar,ai]*[br,bi]
inline float64x2_t cmul(float64x2_t a, float64x2_t b) {
  const float64x2_t sign = {-1.0, 1.0};
  float64x2_t r = vmulq_laneq_f64(b, a, 0);               // [ar br, ar bi]
  float64x2_t bs = vextq_f64(b, b, 1);                    // [bi, br]
  float64x2_t t = vmulq_laneq_f64(bs, a, 1);              // [ai bi, ai br]
  return vfmaq_f64(r, t, sign);                           // [ar br - ai bi, ar bi + ai br]
}

// a*conj(b)
inline float64x2_t cmul_conj(float64x2_t a, float64x2_t b) {
  const float64x2_t sign = {1.0, -1.0};
  float64x2_t r = vmulq_laneq_f64(a, b, 0);               // [br ar, br ai]
  float64x2_t as = vextq_f64(a, a, 1);                    // [ai, ar]
  float64x2_t t = vmulq_laneq_f64(as, b, 1);              // [bi ai, bi ar]
  return vfmaq_f64(r, t, sign);                           // [ar br + ai bi, ai br - ar bi]
}

// i*a
inline float64x2_t cmul_i(float64x2_t a) {
  const float64x2_t sign = {-1.0, 1.0};
  return vmulq_f64(vextq_f64(a, a, 1), sign);
}

void cnls_deriv(const cxd* u, const cxd* v, cxd* du, cxd* dv, std::size_t n, double A,
                double B) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  double* dud = dp(du);
  double* dvd = dp(dv);
  for (std::size_t j = 0; j < n; ++j) {
    float64x2_t uu = vld1q_f64(ud + 2 * j);
    float64x2_t vv = vld1q_f64(vd + 2 * j);
    const double mu = vaddvq_f64(vmulq_f64(uu, uu));
    const double mv = vaddvq_f64(vmulq_f64(vv, vv));
    float64x2_t pu = vmulq_n_f64(uu, mu + A * mv);
    float64x2_t pv = vmulq_n_f64(vv, A * mu + mv);
    pu = vfmaq_n_f64(pu, cmul_conj(cmul(vv, vv), uu), B);
    pv = vfmaq_n_f64(pv, cmul_conj(cmul(uu, uu), vv), B);
    vst1q_f64(dud + 2 * j, cmul_i(pu));
    vst1q_f64(dvd + 2 * j, cmul_i(pv));
  }
}

void cx_add_scaled(cxd* out, const cxd* base, const cxd* k, double c, std::size_t n) {
  double* o = dp(out);
  const double* b = dp(base);
  const double* kd = dp(k);
  const std::size_t m = 2 * n;
  std::size_t j = 0;
  for (; j + 2 <= m; j += 2)
    vst1q_f64(o + j, vfmaq_n_f64(vld1q_f64(b + j), vld1q_f64(kd + j), c));
  for (; j < m; ++j) o[j] = b[j] + c * kd[j];
}

void cx_rk4_combine(cxd* y, const cxd* k1, const cxd* k2, const cxd* k3, const cxd* k4,
                    double h, std::size_t n) {
  double* yd = dp(y);
  const double* a = dp(k1);
  const double* b = dp(k2);
  const double* c = dp(k3);
  const double* d = dp(k4);
  const double h6 = h / 6.0;
  const std::size_t m = 2 * n;
  std::size_t j = 0;
  for (; j + 2 <= m; j += 2) {
    float64x2_t s = vaddq_f64(vld1q_f64(b + j), vld1q_f64(c + j));
    s = vfmaq_n_f64(vaddq_f64(vld1q_f64(a + j), vld1q_f64(d + j)), s, 2.0);
    vst1q_f64(yd + j, vfmaq_n_f64(vld1q_f64(yd + j), s, h6));
  }
  for (; j < m; ++j) yd[j] += h6 * (a[j] + 2.0 * (b[j] + c[j]) + d[j]);
}

void cx_apply_filter(cxd* spec, const double* amp, const cxd* phase, double scale,
                     std::size_t n) {
  double* s = dp(spec);
  const double* ph = dp(phase);
  for (std::size_t j = 0; j < n; ++j) {
    float64x2_t f = vmulq_n_f64(vld1q_f64(ph + 2 * j), scale * amp[j]);
    vst1q_f64(s + 2 * j, cmul(vld1q_f64(s + 2 * j), f));
  }
}

double energy_pair(const cxd* u, const cxd* v, std::size_t n) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  const std::size_t m = 2 * n;
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t j = 0;
  for (; j + 2 <= m; j += 2) {
    float64x2_t a = vld1q_f64(ud + j);
    float64x2_t b = vld1q_f64(vd + j);
    acc = vfmaq_f64(acc, a, a);
    acc = vfmaq_f64(acc, b, b);
  }
  double r = vaddvq_f64(acc);
  for (; j < m; ++j) r += ud[j] * ud[j] + vd[j] * vd[j];
  return r;
}

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2)
    acc = vfmaq_f64(acc, vld1q_f64(a + j), vld1q_f64(b + j));
  double r = vaddvq_f64(acc);
  for (; j < n; ++j) r += a[j] * b[j];
  return r;
}

void axpy(double* y, double a, const double* x, std::size_t n) {
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2)
    vst1q_f64(y + j, vfmaq_n_f64(vld1q_f64(y + j), vld1q_f64(x + j), a));
  for (; j < n; ++j) y[j] += a * x[j];
}

void matvec_t(const double* W, const double* x, double* y, std::size_t n_in,
              std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    const double* row = W + i * n_out;
    std::size_t o = 0;
    for (; o + 2 <= n_out; o += 2)
      vst1q_f64(y + o, vfmaq_n_f64(vld1q_f64(y + o), vld1q_f64(row + o), xi));
    for (; o < n_out; ++o) y[o] += xi * row[o];
  }
}

void matvec(const double* W, const double* d, double* out, std::size_t n_in,
            std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* row = W + i * n_out;
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t o = 0;
    for (; o + 2 <= n_out; o += 2)
      acc = vfmaq_f64(acc, vld1q_f64(row + o), vld1q_f64(d + o));
    double r = vaddvq_f64(acc);
    for (; o < n_out; ++o) r += row[o] * d[o];
    out[i] = r;
  }
}

void outer_acc(double* W, const double* x, const double* d, std::size_t n_in,
               std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    double* row = W + i * n_out;
    std::size_t o = 0;
    for (; o + 2 <= n_out; o += 2)
      vst1q_f64(row + o, vfmaq_n_f64(vld1q_f64(row + o), vld1q_f64(d + o), xi));
    for (; o < n_out; ++o) row[o] += xi * d[o];
  }
}

// Degree-7 Taylor of exp, remainder < 2.5e-13 relative for |x| <= 0.1.
void gain_amp(double* dst, const double* base, double g, double c, std::size_t n) {
  const float64x2_t cv = vdupq_n_f64(-c);
  const float64x2_t c7 = vdupq_n_f64(1.0 / 5040.0);
  const float64x2_t c6 = vdupq_n_f64(1.0 / 720.0);
  const float64x2_t c5 = vdupq_n_f64(1.0 / 120.0);
  const float64x2_t c4 = vdupq_n_f64(1.0 / 24.0);
  const float64x2_t c3 = vdupq_n_f64(1.0 / 6.0);
  const float64x2_t c2 = vdupq_n_f64(0.5);
  const float64x2_t c1 = vdupq_n_f64(1.0);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    float64x2_t x = vfmaq_n_f64(cv, vld1q_f64(base + j), g);
    float64x2_t p = vfmaq_f64(c6, c7, x);
    p = vfmaq_f64(c5, p, x);
    p = vfmaq_f64(c4, p, x);
    p = vfmaq_f64(c3, p, x);
    p = vfmaq_f64(c2, p, x);
    p = vfmaq_f64(c1, p, x);
    p = vfmaq_f64(c1, p, x);
    vst1q_f64(dst + j, p);
  }
  for (; j < n; ++j) dst[j] = std::exp(g * base[j] - c);
}

}  // namespace

const Backend backend = {cnls_deriv, cx_add_scaled, cx_rk4_combine,  cx_apply_filter,
                         energy_pair, dot,           axpy,           matvec_t,
                         matvec,      outer_acc,     gain_amp,       "neon"};

}  // namespace mlfl::kernels::neon

#endif  // aarch64
