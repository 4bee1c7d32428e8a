// SPDX-License-Identifier: Apache-2.0
// Hot inner-loop kernels with scalar reference implementations and vector
// variants (AVX2 on x86_64, NEON on aarch64) selected once at startup.
#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace mlfl {

using cxd = std::complex<double>;

namespace kernels {

// All complex arrays are interleaved (re,im) pairs; W is row-major n_in x n_out.
// Vector backends may reorder reductions and contract with FMA, so results
// agree with the scalar reference to rounding (~1e-13 relative), not bitwise.
struct Backend {
  // du = i[(|u|^2 + A|v|^2)u + B v^2 conj(u)], dv with the roles of u,v swapped.
  void (*cnls_deriv)(const cxd* u, const cxd* v, cxd* du, cxd* dv, std::size_t n,
                     double A, double B);
  // out = base + c*k; out may alias base.
  void (*cx_add_scaled)(cxd* out, const cxd* base, const cxd* k, double c, std::size_t n);
  // y += (h/6)(k1 + 2 k2 + 2 k3 + k4)
  void (*cx_rk4_combine)(cxd* y, const cxd* k1, const cxd* k2, const cxd* k3,
                         const cxd* k4, double h, std::size_t n);
  // spec[j] *= scale * amp[j] * phase[j]
  void (*cx_apply_filter)(cxd* spec, const double* amp, const cxd* phase, double scale,
                          std::size_t n);
  // sum_j |u_j|^2 + |v_j|^2
  double (*energy_pair)(const cxd* u, const cxd* v, std::size_t n);
  // sum_j a_j b_j
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += a*x
  void (*axpy)(double* y, double a, const double* x, std::size_t n);
  // y += W^T x, i.e. y[o] += sum_i W[i*n_out+o] x[i]
  void (*matvec_t)(const double* W, const double* x, double* y, std::size_t n_in,
                   std::size_t n_out);
  // out[i] = sum_o W[i*n_out+o] d[o]  (overwrites out)
  void (*matvec)(const double* W, const double* d, double* out, std::size_t n_in,
                 std::size_t n_out);
  // W[i*n_out+o] += x[i] d[o]
  void (*outer_acc)(double* W, const double* x, const double* d, std::size_t n_in,
                    std::size_t n_out);
  // dst[j] = exp(g*base[j] - c). Vector backends use a short polynomial that
  // holds to ~2e-13 relative only for |g*base - c| <= 0.1; callers must check
  // the bound and fall back to std::exp outside it.
  void (*gain_amp)(double* dst, const double* base, double g, double c, std::size_t n);
  const char* name;
};

namespace scalar {
extern const Backend backend;
}
#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
extern const Backend backend;  // present in the build only on x86_64
}
#endif
#if defined(__aarch64__)
namespace neon {
extern const Backend backend;
}
#endif

// Backend picked at first use: MLFL_KERNELS env override ("scalar", "avx2",
// "neon"), else the widest variant the CPU reports, else scalar.
const Backend& active();

// Every backend compiled into this binary; for equivalence tests.
std::vector<const Backend*> all();

}  // namespace kernels
}  // namespace mlfl
