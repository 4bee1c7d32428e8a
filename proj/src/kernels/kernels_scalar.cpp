// SPDX-License-Identifier: Apache-2.0
#include "mlfl/kernels.hpp"

#include <cmath>

#include "kernels_detail.hpp"

namespace mlfl::kernels::scalar {
namespace {

const double* dp(const cxd* p) { return reinterpret_cast<const double*>(p); }
double* dp(cxd* p) { return reinterpret_cast<double*>(p); }

void cnls_deriv(const cxd* u, const cxd* v, cxd* du, cxd* dv, std::size_t n, double A,
                double B) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  double* dud = dp(du);
  double* dvd = dp(dv);
  for (std::size_t j = 0; j < n; ++j) {
    detail::cnls_deriv_one(ud[2 * j], ud[2 * j + 1], vd[2 * j], vd[2 * j + 1], A, B,
                           dud[2 * j], dud[2 * j + 1], dvd[2 * j], dvd[2 * j + 1]);
  }
}

void cx_add_scaled(cxd* out, const cxd* base, const cxd* k, double c, std::size_t n) {
  double* o = dp(out);
  const double* b = dp(base);
  const double* kd = dp(k);
  for (std::size_t j = 0; j < 2 * n; ++j) o[j] = b[j] + c * kd[j];
}

void cx_rk4_combine(cxd* y, const cxd* k1, const cxd* k2, const cxd* k3, const cxd* k4,
                    double h, std::size_t n) {
  double* yd = dp(y);
  const double* a = dp(k1);
  const double* b = dp(k2);
  const double* c = dp(k3);
  const double* d = dp(k4);
  const double h6 = h / 6.0;
  for (std::size_t j = 0; j < 2 * n; ++j)
    yd[j] += h6 * (a[j] + 2.0 * (b[j] + c[j]) + d[j]);
}

void cx_apply_filter(cxd* spec, const double* amp, const cxd* phase, double scale,
                     std::size_t n) {
  double* s = dp(spec);
  const double* ph = dp(phase);
  for (std::size_t j = 0; j < n; ++j)
    detail::apply_filter_one(s + 2 * j, amp[j], ph[2 * j], ph[2 * j + 1], scale);
}

double energy_pair(const cxd* u, const cxd* v, std::size_t n) {
  const double* ud = dp(u);
  const double* vd = dp(v);
  double acc = 0.0;
  for (std::size_t j = 0; j < 2 * n; ++j) acc += ud[j] * ud[j] + vd[j] * vd[j];
  return acc;
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) acc += a[j] * b[j];
  return acc;
}

void axpy(double* y, double a, const double* x, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

void matvec_t(const double* W, const double* x, double* y, std::size_t n_in,
              std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    const double* row = W + i * n_out;
    for (std::size_t o = 0; o < n_out; ++o) y[o] += xi * row[o];
  }
}

void matvec(const double* W, const double* d, double* out, std::size_t n_in,
            std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* row = W + i * n_out;
    double acc = 0.0;
    for (std::size_t o = 0; o < n_out; ++o) acc += row[o] * d[o];
    out[i] = acc;
  }
}

void outer_acc(double* W, const double* x, const double* d, std::size_t n_in,
               std::size_t n_out) {
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    double* row = W + i * n_out;
    for (std::size_t o = 0; o < n_out; ++o) row[o] += xi * d[o];
  }
}

void gain_amp(double* dst, const double* base, double g, double c, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) dst[j] = std::exp(g * base[j] - c);
}

}  // namespace

const Backend backend = {cnls_deriv, cx_add_scaled, cx_rk4_combine,  cx_apply_filter,
                         energy_pair, dot,           axpy,           matvec_t,
                         matvec,      outer_acc,     gain_amp,       "scalar"};

}  // namespace mlfl::kernels::scalar
