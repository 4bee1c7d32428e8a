// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "mlfl/cavity.hpp"
#include "mlfl/errors.hpp"
#include "mlfl/rng.hpp"
#include "support/helpers.hpp"

using namespace mlfl;
using namespace mlfl::cavity;

namespace {

constexpr double kPi = 3.14159265358979323846;

FieldState sech_field(const CavityParams& p, double amp, bool fill_v) {
  FieldState f;
  f.dt = p.dt();
  f.u.resize(p.n_t);
  f.v.resize(p.n_t);
  for (int j = 0; j < p.n_t; ++j) {
    const double t = (j - p.n_t / 2.0) * f.dt;
    f.u[j] = amp / std::cosh(t);
    f.v[j] = fill_v ? f.u[j] : cxd(0.0);
  }
  return f;
}

CavityParams conservative_params() {
  CavityParams p;
  p.D = 1.0;
  p.K = 0.0;
  p.g0 = 0.0;
  p.Gamma = 0.0;
  p.tau = 0.0;
  return p;
}

double max_abs_diff(const std::vector<cxd>& a, const std::vector<cxd>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("half-wave plate at pi/2 is diag(i,-i)") {
  Matrix2c m = jones_matrix(Element::half_wave, kPi / 2.0);
  CHECK(std::abs(m.m00 - cxd(0, 1)) < 1e-12);
  CHECK(std::abs(m.m11 - cxd(0, -1)) < 1e-12);
  CHECK(std::abs(m.m01) < 1e-12);
  CHECK(std::abs(m.m10) < 1e-12);
}

TEST_CASE("quarter-wave plate at 0 is diag(exp(-i pi/4), exp(i pi/4))") {
  Matrix2c m = jones_matrix(Element::quarter_wave, 0.0);
  CHECK(std::abs(m.m00 - std::polar(1.0, -kPi / 4)) < 1e-12);
  CHECK(std::abs(m.m11 - std::polar(1.0, kPi / 4)) < 1e-12);
  CHECK(std::abs(m.m01) < 1e-12);
  CHECK(std::abs(m.m10) < 1e-12);
}

TEST_CASE("waveplates are unitary and pi-periodic, polarizer is idempotent") {
  SeededRng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    const double a = rng.uniform(-8.0, 8.0);
    for (Element e : {Element::quarter_wave, Element::half_wave}) {
      Matrix2c m = jones_matrix(e, a);
      // J^dagger J == I entrywise
      const cxd i00 = std::conj(m.m00) * m.m00 + std::conj(m.m10) * m.m10;
      const cxd i01 = std::conj(m.m00) * m.m01 + std::conj(m.m10) * m.m11;
      const cxd i11 = std::conj(m.m01) * m.m01 + std::conj(m.m11) * m.m11;
      CHECK(std::abs(i00 - 1.0) < 1e-12);
      CHECK(std::abs(i01) < 1e-12);
      CHECK(std::abs(i11 - 1.0) < 1e-12);
    }
    for (Element e : {Element::quarter_wave, Element::half_wave, Element::polarizer}) {
      Matrix2c m1 = jones_matrix(e, a);
      Matrix2c m2 = jones_matrix(e, a + kPi);
      CHECK(std::abs(m1.m00 - m2.m00) < 1e-12);
      CHECK(std::abs(m1.m01 - m2.m01) < 1e-12);
      CHECK(std::abs(m1.m10 - m2.m10) < 1e-12);
      CHECK(std::abs(m1.m11 - m2.m11) < 1e-12);
    }
    Matrix2c p = jones_matrix(Element::polarizer, a);
    Matrix2c pp = p * p;
    CHECK(std::abs(pp.m00 - p.m00) < 1e-12);
    CHECK(std::abs(pp.m01 - p.m01) < 1e-12);
    CHECK(std::abs(pp.m10 - p.m10) < 1e-12);
    CHECK(std::abs(pp.m11 - p.m11) < 1e-12);
  }
}

TEST_CASE("polarizer never increases energy") {
  SeededRng rng(4);
  CavityParams p;
  for (int trial = 0; trial < 10; ++trial) {
    FieldState f = initial_field(p, rng);
    const double before = total_energy(f);
    apply_jones(f, jones_matrix(Element::polarizer, rng.uniform(0.0, kPi)));
    CHECK(total_energy(f) <= before * (1.0 + 1e-12));
  }
}

TEST_CASE("fundamental soliton propagates with phase z/2 and max error <= 1e-6") {
  CavityParams p = conservative_params();
  CavitySimulator sim(p);
  FieldState f = sech_field(p, 1.0, false);
  const double e0 = total_energy(f);
  CHECK(mlfl::testing::rel_err(e0, 2.0) < 1e-4);  // integral of sech^2 = 2
  sim.propagate_fiber(f, 1.0);
  std::vector<cxd> want(p.n_t);
  const cxd rot = std::polar(1.0, 0.5);
  for (int j = 0; j < p.n_t; ++j) {
    const double t = (j - p.n_t / 2.0) * f.dt;
    want[j] = rot / std::cosh(t);
  }
  CHECK(max_abs_diff(f.u, want) <= 1e-6);
  for (auto& z : f.v) CHECK(std::abs(z) < 1e-12);
  CHECK(std::abs(total_energy(f) - e0) < 1e-10);
  CHECK(f.z == doctest::Approx(1.0));
}

TEST_CASE("birefringence adds a -Kz phase to u") {
  CavityParams p = conservative_params();
  p.K = 0.2;
  CavitySimulator sim(p);
  FieldState f = sech_field(p, 1.0, false);
  sim.propagate_fiber(f, 1.0);
  // soliton phase z/2 minus K z
  const cxd rot = std::polar(1.0, 0.5 - 0.2);
  std::vector<cxd> want(p.n_t);
  for (int j = 0; j < p.n_t; ++j) {
    const double t = (j - p.n_t / 2.0) * f.dt;
    want[j] = rot / std::cosh(t);
  }
  CHECK(max_abs_diff(f.u, want) <= 1e-6);
}

TEST_CASE("split-step converges at second order") {
  CavityParams p = conservative_params();
  auto run_err = [&](double dz) {
    CavityParams q = p;
    q.dz = dz;
    CavitySimulator sim(q);
    FieldState f = sech_field(q, 1.0, false);
    sim.propagate_fiber(f, 0.5);
    std::vector<cxd> want(q.n_t);
    const cxd rot = std::polar(1.0, 0.25);
    for (int j = 0; j < q.n_t; ++j) {
      const double t = (j - q.n_t / 2.0) * f.dt;
      want[j] = rot / std::cosh(t);
    }
    return max_abs_diff(f.u, want);
  };
  const double e1 = run_err(4e-3);
  const double e2 = run_err(2e-3);
  CHECK(e1 / e2 > 3.0);  // ~4 for a second-order scheme
  CHECK(e1 / e2 < 5.0);
}

TEST_CASE("Gaussian field has normalized spectral kurtosis 3") {
  CavityParams p;
  FieldState f;
  f.dt = p.dt();
  f.u.resize(p.n_t);
  f.v.resize(p.n_t);
  const double sigma = 2.0;
  for (int j = 0; j < p.n_t; ++j) {
    const double t = (j - p.n_t / 2.0) * f.dt;
    f.u[j] = std::exp(-t * t / (2.0 * sigma * sigma));
    f.v[j] = 0.0;
  }
  Measurement m = measure_field(f, p);
  CHECK(std::abs(m.M - 3.0) < 1e-6);
  CHECK(m.O == m.E / m.M);

  CavityParams praw = p;
  praw.kurtosis_mode = KurtosisMode::raw_m4;
  Measurement mr = measure_field(f, praw);
  // the density is |u_hat|^2, a Gaussian with variance 1/(2 sigma^2), whose
  // fourth central moment is 3/(4 sigma^4)
  CHECK(std::abs(mr.M - 0.75 / (sigma * sigma * sigma * sigma)) < 1e-6);
  CHECK(mr.O == mr.E / mr.M);
}

TEST_CASE("measurement matches a slow-DFT moment oracle on a random field") {
  CavityParams p;
  p.n_t = 32;
  SeededRng rng(17);
  FieldState f = initial_field(p, rng);
  for (auto& z : f.u) z += cxd(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
  for (auto& z : f.v) z += cxd(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));

  // Oracle computed with an independent O(n^2) transform and direct sums.
  auto Xu = mlfl::testing::slow_dft(f.u);
  auto Xv = mlfl::testing::slow_dft(f.v);
  const int n = p.n_t;
  std::vector<double> w(n), S(n);
  double total = 0.0, e_time = 0.0;
  for (int k = 0; k < n; ++k) {
    const double idx = (k < n / 2) ? k : k - n;
    w[k] = idx * kPi / p.t_window;
    S[k] = std::norm(Xu[k]) + std::norm(Xv[k]);
    total += S[k];
  }
  for (int j = 0; j < n; ++j) e_time += (std::norm(f.u[j]) + std::norm(f.v[j])) * f.dt;
  double c = 0.0;
  for (int k = 0; k < n; ++k) c += S[k] * w[k];
  c /= total;
  double m2 = 0.0, m4 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double d2 = (w[k] - c) * (w[k] - c);
    m2 += S[k] * d2;
    m4 += S[k] * d2 * d2;
  }
  m2 /= total;
  m4 /= total;
  const double want_m = m4 / (m2 * m2);

  Measurement m = measure_field(f, p);
  CHECK(mlfl::testing::rel_err(m.E, e_time) < 1e-10);
  CHECK(mlfl::testing::rel_err(m.M, want_m) < 1e-9);
  CHECK(m.O == m.E / m.M);
}

TEST_CASE("degenerate and diverging fields raise the right errors") {
  CavityParams p;
  FieldState f;
  f.dt = p.dt();
  f.u.assign(p.n_t, cxd(0.0));
  f.v.assign(p.n_t, cxd(0.0));
  CHECK_THROWS_AS(measure_field(f, p), DegenerateFieldError);

  // RK4 goes unstable when |u|^2 dz is far outside its stability region; the
  // solver must notice the nonfinite field and report where.
  CavityParams q = conservative_params();
  q.dz = 0.25;
  CavitySimulator sim(q);
  FieldState g = sech_field(q, 5.0, true);
  bool threw = false;
  try {
    sim.propagate_fiber(g, 10.0);
  } catch (const SolverDivergence& e) {
    threw = true;
    CHECK(e.z >= 0.0);
    CHECK(e.z <= 10.0);
  }
  CHECK(threw);
}

TEST_CASE("round trips advance z, stay finite, and are deterministic in the seed") {
  CavityParams p;
  CavitySimulator sim(p);
  SeededRng r1(42), r2(42);
  FieldState f1 = sim.make_initial_field(r1);
  FieldState f2 = sim.make_initial_field(r2);
  WaveplateAngles a{0.5, 1.0, 1.5, 0.25};
  for (int t = 0; t < 3; ++t) {
    sim.round_trip(f1, a);
    sim.round_trip(f2, a);
  }
  CHECK(f1.z == doctest::Approx(3.0));
  for (int j = 0; j < p.n_t; ++j) {
    CHECK(f1.u[j] == f2.u[j]);  // bitwise: same seed, same build
    CHECK(f1.v[j] == f2.v[j]);
  }
  Measurement m = sim.measure(f1);
  CHECK(std::isfinite(m.E));
  CHECK(m.E > 0.0);
  CHECK(m.M > 0.0);
  CHECK(m.O == m.E / m.M);
}

TEST_CASE("set_k rebuilds the linear tables") {
  CavityParams p;
  p.K = 0.1;
  CavitySimulator sim_a(p);
  SeededRng r1(7), r2(7);
  FieldState fa = sim_a.make_initial_field(r1);
  sim_a.propagate_fiber(fa, 1.0);
  sim_a.set_k(0.25);
  sim_a.propagate_fiber(fa, 1.0);

  // Fresh simulator with the same K schedule must agree bitwise.
  CavityParams q = p;
  CavitySimulator sim_b(q);
  FieldState fb = sim_b.make_initial_field(r2);
  sim_b.propagate_fiber(fb, 1.0);
  sim_b.set_k(0.25);
  sim_b.propagate_fiber(fb, 1.0);
  CHECK(max_abs_diff(fa.u, fb.u) == 0.0);
  CHECK(max_abs_diff(fa.v, fb.v) == 0.0);

  // And it must differ from never changing K at all.
  CavitySimulator sim_c(p);
  SeededRng r3(7);
  FieldState fc = sim_c.make_initial_field(r3);
  sim_c.propagate_fiber(fc, 1.0);
  sim_c.propagate_fiber(fc, 1.0);
  CHECK(max_abs_diff(fa.u, fc.u) > 0.0);
}

TEST_CASE("initial field is the seeded sech pulse") {
  CavityParams p;
  SeededRng r1(9), r2(9), r3(10);
  FieldState a = initial_field(p, r1);
  FieldState b = initial_field(p, r2);
  FieldState c = initial_field(p, r3);
  CHECK(max_abs_diff(a.u, b.u) == 0.0);
  CHECK(max_abs_diff(a.v, b.v) == 0.0);
  CHECK(max_abs_diff(a.u, c.u) > 0.0);   // different seed, different noise
  CHECK(max_abs_diff(a.u, a.v) > 0.0);   // u and v noise draws are independent
  // 2 * integral of (0.1 sech)^2 = 0.04, noise contributes ~1e-6
  CHECK(std::abs(total_energy(a) - 0.04) < 1e-3);
  CHECK(a.z == 0.0);
}

TEST_CASE("parameter validation rejects nonsense") {
  CavityParams p;
  p.n_t = 3;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = CavityParams{};
  p.dz = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = CavityParams{};
  p.E0 = -1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = CavityParams{};
  CavitySimulator sim(p);
  FieldState f;
  f.u.resize(16);
  f.v.resize(16);
  f.dt = 0.1;
  CHECK_THROWS_AS(sim.propagate_fiber(f, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(sim.measure(f), std::invalid_argument);
  FieldState g = sech_field(p, 1.0, true);
  CHECK_THROWS_AS(sim.propagate_fiber(g, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(sim.run_to_measurement(g, WaveplateAngles{}, 0), std::invalid_argument);
}

TEST_CASE("wrap_angle lands in [0, pi)") {
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(kPi) == doctest::Approx(0.0));
  CHECK(wrap_angle(-0.1) == doctest::Approx(kPi - 0.1));
  CHECK(wrap_angle(7.5) == doctest::Approx(7.5 - 2 * kPi));
  SeededRng rng(5);
  for (int i = 0; i < 50; ++i) {
    const double a = rng.uniform(-30.0, 30.0);
    const double w = wrap_angle(a);
    CHECK(w >= 0.0);
    CHECK(w < kPi);
    // same element behavior
    Matrix2c m1 = jones_matrix(Element::half_wave, a);
    Matrix2c m2 = jones_matrix(Element::half_wave, w);
    CHECK(std::abs(m1.m00 - m2.m00) < 1e-9);
    CHECK(std::abs(m1.m01 - m2.m01) < 1e-9);
  }
}
