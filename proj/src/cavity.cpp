// SPDX-License-Identifier: Apache-2.0
#include "mlfl/cavity.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <stdexcept>
#include <string>

#include "mlfl/errors.hpp"
#include "mlfl/kernels.hpp"

namespace mlfl::cavity {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// The FFTW planner mutates global state; executions are thread-safe, planning
// is not.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void CavityParams::validate() const {
  if (n_t < 4 || n_t % 2 != 0) throw std::invalid_argument("n_t must be even and >= 4");
  if (!(dz > 0.0)) throw std::invalid_argument("dz must be positive");
  if (!(t_window > 0.0)) throw std::invalid_argument("t_window must be positive");
  if (!(E0 > 0.0)) throw std::invalid_argument("E0 must be positive");
  if (g0 < 0.0) throw std::invalid_argument("g0 must be nonnegative");
  if (Gamma < 0.0) throw std::invalid_argument("Gamma must be nonnegative");
  if (tau < 0.0) throw std::invalid_argument("tau must be nonnegative");
  if (!(eps_energy > 0.0)) throw std::invalid_argument("eps_energy must be positive");
  if (!(k_min <= k_max)) throw std::invalid_argument("k_min must not exceed k_max");
  if (init_amplitude < 0.0 || init_noise < 0.0)
    throw std::invalid_argument("initial field amplitudes must be nonnegative");
}

double wrap_angle(double a) {
  double r = std::fmod(a, kPi);
  if (r < 0.0) r += kPi;
  return r;
}

Matrix2c Matrix2c::operator*(const Matrix2c& r) const {
  return {m00 * r.m00 + m01 * r.m10, m00 * r.m01 + m01 * r.m11,
          m10 * r.m00 + m11 * r.m10, m10 * r.m01 + m11 * r.m11};
}

Matrix2c jones_matrix(Element e, double alpha) {
  const double c = std::cos(alpha), s = std::sin(alpha);
  cxd w0, w1;
  switch (e) {
    case Element::quarter_wave:
      w0 = std::polar(1.0, -kPi / 4.0);
      w1 = std::polar(1.0, kPi / 4.0);
      break;
    case Element::half_wave:
      w0 = cxd(0.0, -1.0);
      w1 = cxd(0.0, 1.0);
      break;
    case Element::polarizer:
      w0 = 1.0;
      w1 = 0.0;
      break;
  }
  // R(a) diag(w0,w1) R(-a)
  return {w0 * c * c + w1 * s * s, (w0 - w1) * c * s,
          (w0 - w1) * c * s, w0 * s * s + w1 * c * c};
}

FieldState initial_field(const CavityParams& p, SeededRng& rng) {
  p.validate();
  FieldState f;
  const std::size_t n = static_cast<std::size_t>(p.n_t);
  f.dt = p.dt();
  f.u.resize(n);
  f.v.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double t = (static_cast<double>(j) - p.n_t / 2.0) * f.dt;
    const double env = p.init_amplitude / std::cosh(t);
    f.u[j] = env;
    f.v[j] = env;
  }
  for (std::size_t j = 0; j < n; ++j)
    f.u[j] += p.init_noise * cxd(rng.normal(), rng.normal());
  for (std::size_t j = 0; j < n; ++j)
    f.v[j] += p.init_noise * cxd(rng.normal(), rng.normal());
  return f;
}

double total_energy(const FieldState& f) {
  return kernels::active().energy_pair(f.u.data(), f.v.data(), f.u.size()) * f.dt;
}

void apply_jones(FieldState& f, const Matrix2c& m) {
  for (std::size_t j = 0; j < f.u.size(); ++j) {
    const cxd u = f.u[j], v = f.v[j];
    f.u[j] = m.m00 * u + m.m01 * v;
    f.v[j] = m.m10 * u + m.m11 * v;
  }
}

void apply_discrete_elements(FieldState& f, const WaveplateAngles& a) {
  const Matrix2c m = jones_matrix(Element::polarizer, a.ap) *
                     jones_matrix(Element::quarter_wave, a.a2) *
                     jones_matrix(Element::half_wave, a.a3);
  apply_jones(f, m);
}

void nonlinear_derivative(const FieldState& f, const CavityParams& p,
                          std::vector<cxd>& du, std::vector<cxd>& dv) {
  du.resize(f.u.size());
  dv.resize(f.v.size());
  kernels::active().cnls_deriv(f.u.data(), f.v.data(), du.data(), dv.data(), f.u.size(),
                               p.A, p.B);
}

CavitySimulator::CavitySimulator(const CavityParams& p) : p_(p) {
  p_.validate();
  n_ = static_cast<std::size_t>(p_.n_t);
  dt_ = p_.dt();
  omega_.resize(n_);
  omega2_.resize(n_);
  const double dw = kPi / p_.t_window;
  for (std::size_t k = 0; k < n_; ++k) {
    const double idx = (k < n_ / 2) ? static_cast<double>(k)
                                    : static_cast<double>(k) - static_cast<double>(n_);
    omega_[k] = dw * idx;
    omega2_[k] = omega_[k] * omega_[k];
  }
  amp_base_.resize(n_);
  phase_u_.resize(n_);
  phase_v_.resize(n_);
  amp_.resize(n_);
  us_.resize(n_);
  vs_.resize(n_);
  for (int i = 0; i < 4; ++i) {
    ku_[i].resize(n_);
    kv_[i].resize(n_);
  }
  std::lock_guard<std::mutex> lock(planner_mutex());
  buf_ = reinterpret_cast<cxd*>(fftw_malloc(sizeof(cxd) * 2 * n_));
  if (!buf_) throw std::bad_alloc();
  const int ni = static_cast<int>(n_);
  auto* fw = reinterpret_cast<fftw_complex*>(buf_);
  plan_fwd_ = fftw_plan_many_dft(1, &ni, 2, fw, nullptr, 1, ni, fw, nullptr, 1, ni,
                                 FFTW_FORWARD, FFTW_ESTIMATE);
  plan_bwd_ = fftw_plan_many_dft(1, &ni, 2, fw, nullptr, 1, ni, fw, nullptr, 1, ni,
                                 FFTW_BACKWARD, FFTW_ESTIMATE);
  if (!plan_fwd_ || !plan_bwd_) throw std::runtime_error("fftw planning failed");
}

CavitySimulator::~CavitySimulator() {
  std::lock_guard<std::mutex> lock(planner_mutex());
  if (plan_fwd_) fftw_destroy_plan(static_cast<fftw_plan>(plan_fwd_));
  if (plan_bwd_) fftw_destroy_plan(static_cast<fftw_plan>(plan_bwd_));
  if (buf_) fftw_free(buf_);
}

void CavitySimulator::ensure_linear_tables(double dz_eff) {
  if (dz_eff == cached_dz_ && p_.K == cached_k_) return;
  const double h = dz_eff / 2.0;
  loss_half_ = p_.Gamma * h;
  max_abs_base_ = 0.0;
  for (std::size_t k = 0; k < n_; ++k) {
    amp_base_[k] = (1.0 - p_.tau * omega2_[k]) * h;
    max_abs_base_ = std::max(max_abs_base_, std::abs(amp_base_[k]));
    const double base = 0.5 * p_.D * omega2_[k] * h;
    phase_u_[k] = std::polar(1.0, -(base + p_.K * h));
    phase_v_[k] = std::polar(1.0, -(base - p_.K * h));
  }
  cached_dz_ = dz_eff;
  cached_k_ = p_.K;
}

void CavitySimulator::propagate_fiber(FieldState& f, double z_len) {
  if (!(z_len > 0.0)) throw std::invalid_argument("z_len must be positive");
  if (f.u.size() != n_ || f.v.size() != n_)
    throw std::invalid_argument("field size does not match simulator grid");
  const auto& kr = kernels::active();
  const long n_steps = std::max(1L, std::lround(z_len / p_.dz));
  const double dz = z_len / static_cast<double>(n_steps);
  ensure_linear_tables(dz);

  cxd* bu = buf_;
  cxd* bv = buf_ + n_;
  for (std::size_t j = 0; j < n_; ++j) {
    bu[j] = f.u[j];
    bv[j] = f.v[j];
  }
  const auto fwd = static_cast<fftw_plan>(plan_fwd_);
  const auto bwd = static_cast<fftw_plan>(plan_bwd_);
  fftw_execute(fwd);  // buf now holds unnormalized spectra of u and v

  const double inv_n = 1.0 / static_cast<double>(n_);
  for (long step = 0; step < n_steps; ++step) {
    // Saturating gain from the energy at the step boundary (Parseval).
    const double energy = kr.energy_pair(bu, bv, n_) * dt_ * inv_n;
    if (!std::isfinite(energy))
      throw SolverDivergence("field diverged during fiber propagation",
                             f.z + static_cast<double>(step) * dz);
    const double g = 2.0 * p_.g0 / (1.0 + energy / p_.E0);
    if (g * max_abs_base_ + loss_half_ <= 0.1) {
      kr.gain_amp(amp_.data(), amp_base_.data(), g, loss_half_, n_);
    } else {
      // outside the short-polynomial range (unusual dz/tau configurations)
      for (std::size_t k = 0; k < n_; ++k)
        amp_[k] = std::exp(g * amp_base_[k] - loss_half_);
    }

    // First linear half-step; 1/n folds the upcoming inverse transform.
    kr.cx_apply_filter(bu, amp_.data(), phase_u_.data(), inv_n, n_);
    kr.cx_apply_filter(bv, amp_.data(), phase_v_.data(), inv_n, n_);
    fftw_execute(bwd);

    // Full nonlinear step in the time domain, classical RK4.
    kr.cnls_deriv(bu, bv, ku_[0].data(), kv_[0].data(), n_, p_.A, p_.B);
    kr.cx_add_scaled(us_.data(), bu, ku_[0].data(), dz / 2.0, n_);
    kr.cx_add_scaled(vs_.data(), bv, kv_[0].data(), dz / 2.0, n_);
    kr.cnls_deriv(us_.data(), vs_.data(), ku_[1].data(), kv_[1].data(), n_, p_.A, p_.B);
    kr.cx_add_scaled(us_.data(), bu, ku_[1].data(), dz / 2.0, n_);
    kr.cx_add_scaled(vs_.data(), bv, kv_[1].data(), dz / 2.0, n_);
    kr.cnls_deriv(us_.data(), vs_.data(), ku_[2].data(), kv_[2].data(), n_, p_.A, p_.B);
    kr.cx_add_scaled(us_.data(), bu, ku_[2].data(), dz, n_);
    kr.cx_add_scaled(vs_.data(), bv, kv_[2].data(), dz, n_);
    kr.cnls_deriv(us_.data(), vs_.data(), ku_[3].data(), kv_[3].data(), n_, p_.A, p_.B);
    kr.cx_rk4_combine(bu, ku_[0].data(), ku_[1].data(), ku_[2].data(), ku_[3].data(), dz, n_);
    kr.cx_rk4_combine(bv, kv_[0].data(), kv_[1].data(), kv_[2].data(), kv_[3].data(), dz, n_);

    // Second linear half-step, staying spectral for the next iteration.
    fftw_execute(fwd);
    kr.cx_apply_filter(bu, amp_.data(), phase_u_.data(), 1.0, n_);
    kr.cx_apply_filter(bv, amp_.data(), phase_v_.data(), 1.0, n_);
  }

  const double tail = kr.energy_pair(bu, bv, n_) * dt_ * inv_n;
  if (!std::isfinite(tail))
    throw SolverDivergence("field diverged during fiber propagation", f.z + z_len);
  fftw_execute(bwd);
  for (std::size_t j = 0; j < n_; ++j) {
    f.u[j] = bu[j] * inv_n;
    f.v[j] = bv[j] * inv_n;
  }
  f.z += z_len;
}

void CavitySimulator::round_trip(FieldState& f, const WaveplateAngles& a) {
  apply_jones(f, jones_matrix(Element::quarter_wave, a.a1));
  propagate_fiber(f, 1.0);
  apply_discrete_elements(f, a);
}

Measurement CavitySimulator::measure(const FieldState& f) {
  if (f.u.size() != n_ || f.v.size() != n_)
    throw std::invalid_argument("field size does not match simulator grid");
  const auto& kr = kernels::active();
  const double energy = kr.energy_pair(f.u.data(), f.v.data(), n_) * dt_;
  if (!std::isfinite(energy))
    throw SolverDivergence("nonfinite field in measurement", f.z);
  if (energy < p_.eps_energy)
    throw DegenerateFieldError("field energy " + std::to_string(energy) +
                               " below degeneracy threshold");
  cxd* bu = buf_;
  cxd* bv = buf_ + n_;
  for (std::size_t j = 0; j < n_; ++j) {
    bu[j] = f.u[j];
    bv[j] = f.v[j];
  }
  fftw_execute(static_cast<fftw_plan>(plan_fwd_));

  double total = 0.0;
  for (std::size_t k = 0; k < n_; ++k) {
    amp_[k] = std::norm(bu[k]) + std::norm(bv[k]);  // spectral density workspace
    total += amp_[k];
  }
  double centroid = 0.0;
  for (std::size_t k = 0; k < n_; ++k) centroid += amp_[k] * omega_[k];
  centroid /= total;
  double m2 = 0.0, m4 = 0.0;
  for (std::size_t k = 0; k < n_; ++k) {
    const double d = omega_[k] - centroid;
    const double d2 = d * d;
    m2 += amp_[k] * d2;
    m4 += amp_[k] * d2 * d2;
  }
  m2 /= total;
  m4 /= total;
  if (m2 < 1e-30)
    throw DegenerateFieldError("spectrum collapsed to a single bin");

  Measurement out;
  out.E = energy;
  out.M = (p_.kurtosis_mode == KurtosisMode::normalized) ? m4 / (m2 * m2) : m4;
  out.O = out.E / out.M;
  return out;
}

Measurement CavitySimulator::run_to_measurement(FieldState& f, const WaveplateAngles& a,
                                                int n_trips) {
  if (n_trips < 1) throw std::invalid_argument("n_trips must be >= 1");
  for (int t = 0; t < n_trips; ++t) round_trip(f, a);
  return measure(f);
}

Measurement measure_field(const FieldState& f, const CavityParams& p) {
  CavitySimulator sim(p);
  return sim.measure(f);
}

}  // namespace mlfl::cavity
