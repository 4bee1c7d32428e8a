// SPDX-License-Identifier: Apache-2.0
// Per-element scalar formulas shared by the reference backend and the
// remainder loops of the vector backends. Complex arithmetic is written out
// on re/im doubles: std::complex operator* routes through __muldc3 for Annex G
// edge cases, which is both slow and different from what the vector code does.
#pragma once

#include <cstddef>

namespace mlfl::kernels::detail {

inline void cnls_deriv_one(double ur, double ui, double vr, double vi, double A, double B,
                           double& dur, double& dui, double& dvr, double& dvi) {
  const double mu = ur * ur + ui * ui;
  const double mv = vr * vr + vi * vi;
  const double su = mu + A * mv;
  const double sv = A * mu + mv;
  // v^2 and u^2
  const double v2r = vr * vr - vi * vi, v2i = 2.0 * vr * vi;
  const double u2r = ur * ur - ui * ui, u2i = 2.0 * ur * ui;
  // v^2 conj(u), u^2 conj(v)
  const double cur = v2r * ur + v2i * ui, cui = v2i * ur - v2r * ui;
  const double cvr = u2r * vr + u2i * vi, cvi = u2i * vr - u2r * vi;
  const double pur = su * ur + B * cur, pui = su * ui + B * cui;
  const double pvr = sv * vr + B * cvr, pvi = sv * vi + B * cvi;
  dur = -pui;  // multiply by i
  dui = pur;
  dvr = -pvi;
  dvi = pvr;
}

inline void apply_filter_one(double* sp, double amp, double phr, double phi, double scale) {
  const double fr = scale * amp * phr, fi = scale * amp * phi;
  const double re = sp[0] * fr - sp[1] * fi;
  const double im = sp[0] * fi + sp[1] * fr;
  sp[0] = re;
  sp[1] = im;
}

}  // namespace mlfl::kernels::detail
