// SPDX-License-Identifier: Apache-2.0
// Birefringent ring-cavity simulator: coupled NLS fiber propagation by Strang
// split-step (spectral linear half-steps around an RK4 nonlinear step),
// saturating gain frozen per step, and a discrete waveplate/polarizer block
// applied once per round trip.
#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "mlfl/rng.hpp"

namespace mlfl {
using cxd = std::complex<double>;
}

namespace mlfl::cavity {

enum class KurtosisMode {
  normalized,  // m4 / m2^2 about the spectral centroid
  raw_m4,      // fourth central moment, unnormalized
};

struct CavityParams {
  double D = -0.4;          // group velocity dispersion
  double K = 0.0;           // birefringence splitting
  double A = 2.0 / 3.0;     // cross-phase coefficient
  double B = 1.0 / 3.0;     // four-wave mixing coefficient
  double g0 = 1.7;          // small-signal gain
  double E0 = 3.1;          // gain saturation energy
  double Gamma = 0.1;       // distributed linear loss
  double tau = 0.1;         // gain bandwidth parameter
  double dz = 1e-3;         // split-step size (fiber length is 1 per trip)
  double t_window = 20.0;   // half-width of the time grid, t in [-t_window, t_window)
  int n_t = 256;            // time samples, even
  double k_min = -0.3;      // operating birefringence range (datagen/control)
  double k_max = 0.3;
  KurtosisMode kurtosis_mode = KurtosisMode::normalized;
  double eps_energy = 1e-12;   // below this the field is degenerate
  double init_amplitude = 0.1; // seed pulse height
  double init_noise = 1e-3;    // complex Gaussian noise amplitude

  double dt() const { return 2.0 * t_window / n_t; }
  void validate() const;  // std::invalid_argument on nonsense values
};

struct WaveplateAngles {
  double a1 = 0.0;  // quarter-wave plate before the fiber
  double a2 = 0.0;  // quarter-wave plate after the half-wave plate
  double a3 = 0.0;  // half-wave plate after the fiber
  double ap = 0.0;  // polarizer
};

// Angles are pi-periodic for every element here; canonical range [0, pi).
double wrap_angle(double a);

struct Matrix2c {
  cxd m00, m01, m10, m11;
  Matrix2c operator*(const Matrix2c& r) const;
};

enum class Element { quarter_wave, half_wave, polarizer };

// R(alpha) * W * R(-alpha) in the (u,v) basis.
Matrix2c jones_matrix(Element e, double alpha);

struct FieldState {
  std::vector<cxd> u, v;
  double dt = 0.0;
  double z = 0.0;  // accumulated propagation distance (trips, fiber length 1)
};

struct Measurement {
  double E = 0.0;  // total energy
  double M = 0.0;  // spectral fourth-moment statistic
  double O = 0.0;  // objective E / M
};

// 0.1 sech(t) in both polarizations plus seeded complex Gaussian noise; all u
// samples drawn before all v samples.
FieldState initial_field(const CavityParams& p, SeededRng& rng);

// sum (|u|^2+|v|^2) dt
double total_energy(const FieldState& f);

// Pointwise Jones action on (u,v).
void apply_jones(FieldState& f, const Matrix2c& m);

// Intra-cavity discrete block after the fiber: half-wave(a3), then
// quarter-wave(a2), then polarizer(ap), fused into one matrix.
void apply_discrete_elements(FieldState& f, const WaveplateAngles& a);

// Cubic coupling terms only (the RK4 right-hand side); exposed for tests.
void nonlinear_derivative(const FieldState& f, const CavityParams& p,
                          std::vector<cxd>& du, std::vector<cxd>& dv);

class CavitySimulator {
 public:
  explicit CavitySimulator(const CavityParams& p);
  ~CavitySimulator();
  CavitySimulator(const CavitySimulator&) = delete;
  CavitySimulator& operator=(const CavitySimulator&) = delete;

  const CavityParams& params() const { return p_; }
  void set_k(double k) { p_.K = k; }

  FieldState make_initial_field(SeededRng& rng) const { return initial_field(p_, rng); }

  // Fiber segment of length z_len (round trip uses 1.0). Throws
  // SolverDivergence when the field stops being finite.
  void propagate_fiber(FieldState& f, double z_len);

  // quarter-wave(a1), fiber of length 1, then the discrete block. z += 1.
  void round_trip(FieldState& f, const WaveplateAngles& a);

  // Energy and spectral moments of the current field. Throws
  // DegenerateFieldError when E < eps_energy or the spectrum has no width.
  Measurement measure(const FieldState& f);

  // n_trips round trips at fixed angles, then measure.
  Measurement run_to_measurement(FieldState& f, const WaveplateAngles& a, int n_trips);

 private:
  void ensure_linear_tables(double dz_eff);

  CavityParams p_;
  std::size_t n_;
  double dt_;
  std::vector<double> omega_;   // FFT-ordered angular frequencies
  std::vector<double> omega2_;
  // Linear half-step tables for the cached (dz_eff, K)
  double cached_dz_ = -1.0, cached_k_ = 0.0;
  std::vector<double> amp_base_;       // (1 - tau w^2) * dz/2
  double loss_half_ = 0.0;             // Gamma * dz/2
  double max_abs_base_ = 0.0;          // gates the polynomial exp kernel
  std::vector<cxd> phase_u_, phase_v_;
  std::vector<double> amp_;
  // RK4 workspaces
  std::vector<cxd> us_, vs_, ku_[4], kv_[4];
  // FFT state: one buffer holding u then v, transformed as a batch of two
  cxd* buf_ = nullptr;
  void* plan_fwd_ = nullptr;
  void* plan_bwd_ = nullptr;
};

// Convenience for tests and one-off callers; builds a throwaway workspace.
Measurement measure_field(const FieldState& f, const CavityParams& p);

}  // namespace mlfl::cavity
