// SPDX-License-Identifier: Apache-2.0
// AVX2+FMA variants, two complex doubles per 256-bit lane pair. This file is
// the only one compiled with -mavx2 -mfma; it must not be entered unless the
// CPU reports both (dispatch.cpp checks).
#include "mlfl/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

#include "kernels_detail.hpp"

namespace mlfl::kernels::avx2 {
namespace {

const double* dp(const cxd* p) { return reinterpret_cast<const double*>(p); }
double* dp(cxd* p) { return reinterpret_cast<double*>(p); }

// a*b for interleaved complex pairs
inline __m256d cmul(__m256d a, __m256d b) {
  __m256d br = _mm256_movedup_pd(b);        // [br0 br0 br1 br1]
  __m256d bi = _mm256_permute_pd(b, 0xF);   // [bi0 bi0 bi1 bi1]
  __m256d as = _mm256_permute_pd(a, 0x5);   // [ai0 ar0 ai1 ar1]
  return _mm256_addsub_pd(_mm256_mul_pd(a, br), _mm256_mul_pd(as, bi));
}

// a*conj(b)
inline __m256d cmul_conj(__m256d a, __m256d b) {
  const __m256d neg = _mm256_set1_pd(-0.0);
  __m256d br = _mm256_movedup_pd(b);
  __m256d bi = _mm256_permute_pd(b, 0xF);
  __m256d as = _mm256_permute_pd(a, 0x5);
  __m256d alt = _mm256_xor_pd(_mm256_mul_pd(as, bi), neg);  // negate, addsub flips back
  return _mm256_addsub_pd(_mm256_mul_pd(a, br), alt);
}

// i*a : (re,im) -> (-im, re)
inline __m256d cmul_i(__m256d a) {
  const __m256d mask = _mm256_set_pd(0.0, -0.0, 0.0, -0.0);  // negate low of each pair
  return _mm256_xor_pd(_mm256_permute_pd(a, 0x5), mask);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

void cnls_deriv(const cxd* u, const cxd* v, cxd* du, cxd* dv, std::size_t n, double A,
                double B) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  double* dud = dp(du);
  double* dvd = dp(dv);
  const __m256d Av = _mm256_set1_pd(A);
  const __m256d Bv = _mm256_set1_pd(B);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    __m256d uu = _mm256_loadu_pd(ud + 2 * j);
    __m256d vv = _mm256_loadu_pd(vd + 2 * j);
    __m256d u2abs = _mm256_mul_pd(uu, uu);
    __m256d v2abs = _mm256_mul_pd(vv, vv);
    __m256d mu = _mm256_hadd_pd(u2abs, u2abs);  // |u|^2 per pair
    __m256d mv = _mm256_hadd_pd(v2abs, v2abs);
    __m256d su = _mm256_fmadd_pd(Av, mv, mu);
    __m256d sv = _mm256_fmadd_pd(Av, mu, mv);
    __m256d cu = cmul_conj(cmul(vv, vv), uu);  // v^2 conj(u)
    __m256d cv = cmul_conj(cmul(uu, uu), vv);
    __m256d pu = _mm256_fmadd_pd(Bv, cu, _mm256_mul_pd(su, uu));
    __m256d pv = _mm256_fmadd_pd(Bv, cv, _mm256_mul_pd(sv, vv));
    _mm256_storeu_pd(dud + 2 * j, cmul_i(pu));
    _mm256_storeu_pd(dvd + 2 * j, cmul_i(pv));
  }
  for (; j < n; ++j)
    detail::cnls_deriv_one(ud[2 * j], ud[2 * j + 1], vd[2 * j], vd[2 * j + 1], A, B,
                           dud[2 * j], dud[2 * j + 1], dvd[2 * j], dvd[2 * j + 1]);
}

void cx_add_scaled(cxd* out, const cxd* base, const cxd* k, double c, std::size_t n) {
  double* o = dp(out);
  const double* b = dp(base);
  const double* kd = dp(k);
  const __m256d cv = _mm256_set1_pd(c);
  const std::size_t m = 2 * n;
  std::size_t j = 0;
  for (; j + 4 <= m; j += 4)
    _mm256_storeu_pd(o + j, _mm256_fmadd_pd(cv, _mm256_loadu_pd(kd + j),
                                            _mm256_loadu_pd(b + j)));
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
  const __m256d h6v = _mm256_set1_pd(h6);
  const __m256d two = _mm256_set1_pd(2.0);
  const std::size_t m = 2 * n;
  std::size_t j = 0;
  for (; j + 4 <= m; j += 4) {
    __m256d s = _mm256_add_pd(_mm256_loadu_pd(b + j), _mm256_loadu_pd(c + j));
    s = _mm256_fmadd_pd(two, s, _mm256_add_pd(_mm256_loadu_pd(a + j),
                                              _mm256_loadu_pd(d + j)));
    _mm256_storeu_pd(yd + j, _mm256_fmadd_pd(h6v, s, _mm256_loadu_pd(yd + j)));
  }
  for (; j < m; ++j) yd[j] += h6 * (a[j] + 2.0 * (b[j] + c[j]) + d[j]);
}

void cx_apply_filter(cxd* spec, const double* amp, const cxd* phase, double scale,
                     std::size_t n) {
  double* s = dp(spec);
  const double* ph = dp(phase);
  const __m256d sc = _mm256_set1_pd(scale);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    __m128d a2 = _mm_loadu_pd(amp + j);
    __m256d a4 = _mm256_permute4x64_pd(_mm256_castpd128_pd256(a2), 0x50);  // [a0 a0 a1 a1]
    __m256d f = _mm256_mul_pd(_mm256_mul_pd(a4, sc), _mm256_loadu_pd(ph + 2 * j));
    _mm256_storeu_pd(s + 2 * j, cmul(_mm256_loadu_pd(s + 2 * j), f));
  }
  for (; j < n; ++j)
    detail::apply_filter_one(s + 2 * j, amp[j], ph[2 * j], ph[2 * j + 1], scale);
}

double energy_pair(const cxd* u, const cxd* v, std::size_t n) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  const std::size_t m = 2 * n;
  __m256d acc = _mm256_setzero_pd();
  std::size_t j = 0;
  for (; j + 4 <= m; j += 4) {
    __m256d a = _mm256_loadu_pd(ud + j);
    __m256d b = _mm256_loadu_pd(vd + j);
    acc = _mm256_fmadd_pd(a, a, acc);
    acc = _mm256_fmadd_pd(b, b, acc);
  }
  double r = hsum(acc);
  for (; j < m; ++j) r += ud[j] * ud[j] + vd[j] * vd[j];
  return r;
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + j), _mm256_loadu_pd(b + j), acc);
  double r = hsum(acc);
  for (; j < n; ++j) r += a[j] * b[j];
  return r;
}

void axpy(double* y, double a, const double* x, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4)
    _mm256_storeu_pd(y + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + j),
                                            _mm256_loadu_pd(y + j)));
  for (; j < n; ++j) y[j] += a * x[j];
}

void matvec_t(const double* W, const double* x, double* y, std::size_t n_in,
              std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const __m256d xi = _mm256_set1_pd(x[i]);
    const double* row = W + i * n_out;
    std::size_t o = 0;
    for (; o + 4 <= n_out; o += 4)
      _mm256_storeu_pd(y + o, _mm256_fmadd_pd(xi, _mm256_loadu_pd(row + o),
                                              _mm256_loadu_pd(y + o)));
    for (; o < n_out; ++o) y[o] += x[i] * row[o];
  }
}

void matvec(const double* W, const double* d, double* out, std::size_t n_in,
            std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* row = W + i * n_out;
    __m256d acc = _mm256_setzero_pd();
    std::size_t o = 0;
    for (; o + 4 <= n_out; o += 4)
      acc = _mm256_fmadd_pd(_mm256_loadu_pd(row + o), _mm256_loadu_pd(d + o), acc);
    double r = hsum(acc);
    for (; o < n_out; ++o) r += row[o] * d[o];
    out[i] = r;
  }
}

void outer_acc(double* W, const double* x, const double* d, std::size_t n_in,
               std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const __m256d xi = _mm256_set1_pd(x[i]);
    double* row = W + i * n_out;
    std::size_t o = 0;
    for (; o + 4 <= n_out; o += 4)
      _mm256_storeu_pd(row + o, _mm256_fmadd_pd(xi, _mm256_loadu_pd(d + o),
                                                _mm256_loadu_pd(row + o)));
    for (; o < n_out; ++o) row[o] += x[i] * d[o];
  }
}

// Degree-7 Taylor of exp, remainder < 2.5e-13 relative for |x| <= 0.1.
void gain_amp(double* dst, const double* base, double g, double c, std::size_t n) {
  const __m256d gv = _mm256_set1_pd(g);
  const __m256d cv = _mm256_set1_pd(c);
  const __m256d c7 = _mm256_set1_pd(1.0 / 5040.0);
  const __m256d c6 = _mm256_set1_pd(1.0 / 720.0);
  const __m256d c5 = _mm256_set1_pd(1.0 / 120.0);
  const __m256d c4 = _mm256_set1_pd(1.0 / 24.0);
  const __m256d c3 = _mm256_set1_pd(1.0 / 6.0);
  const __m256d c2 = _mm256_set1_pd(0.5);
  const __m256d c1 = _mm256_set1_pd(1.0);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d x = _mm256_fmsub_pd(gv, _mm256_loadu_pd(base + j), cv);
    __m256d p = _mm256_fmadd_pd(c7, x, c6);
    p = _mm256_fmadd_pd(p, x, c5);
    p = _mm256_fmadd_pd(p, x, c4);
    p = _mm256_fmadd_pd(p, x, c3);
    p = _mm256_fmadd_pd(p, x, c2);
    p = _mm256_fmadd_pd(p, x, c1);
    p = _mm256_fmadd_pd(p, x, c1);
    _mm256_storeu_pd(dst + j, p);
  }
  for (; j < n; ++j) dst[j] = std::exp(g * base[j] - c);
}

}  // namespace

const Backend backend = {cnls_deriv, cx_add_scaled, cx_rk4_combine,  cx_apply_filter,
                         energy_pair, dot,           axpy,           matvec_t,
                         matvec,      outer_acc,     gain_amp,       "avx2"};

}  // namespace mlfl::kernels::avx2

#endif  // x86_64
