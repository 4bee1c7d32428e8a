// SPDX-License-Identifier: Apache-2.0
// Training and evaluation data: objective-landscape sweeps over (K, angles),
// time-varying birefringence scenarios, and logged sequence runs.
#pragma once

#include <vector>

#include "mlfl/cavity.hpp"
#include "mlfl/kmap.hpp"
#include "mlfl/mprnn.hpp"
#include "mlfl/rng.hpp"

namespace mlfl::datagen {

using nn::Vec;

// One sweep grid point, settled for n_trips round trips from the shared
// seeded initial field. Degenerate or diverged points carry E=0, M=1, O=0.
struct SweepRecord {
  double k = 0.0;
  cavity::WaveplateAngles a;
  double e = 0.0, m = 1.0, o = 0.0;
  int n_trips = 0;
  unsigned long seed = 0;
  bool degenerate = false;
};

// n equidistant points covering [lo, hi] inclusive; with end_open the grid
// covers [lo, hi) instead (angle grids are pi-periodic).
Vec grid(double lo, double hi, int n, bool end_open = false);

// Cartesian product K x a1 x a2 x a3 x ap in grid-index order (K slowest,
// ap fastest). Points are independent and may be evaluated by a worker pool;
// the output order never depends on scheduling. rng draws the one shared
// initial field; its seed is recorded on every row.
std::vector<SweepRecord> sweep(const Vec& k_grid, const Vec& alpha_grid,
                               const cavity::CavityParams& p, int n_trips, SeededRng& rng);

// Non-degenerate rows adapted for birefringence-map subset selection.
std::vector<kmap::SweepEntry> to_sweep_entries(const std::vector<SweepRecord>& rows);

// Birefringence schedule over controller steps.
struct Scenario {
  enum class Kind { constant, sinusoidal, random_walk };
  Kind kind = Kind::constant;
  double k0 = 0.0;
  double dk = 0.0;        // sinusoidal amplitude
  double period = 100.0;  // sinusoidal period, steps
  double step_sigma = 0.01;
  double k_min = -0.3, k_max = 0.3;
  int length = 0;
  unsigned long seed = 0;

  void validate() const;  // throws ConfigError
};

// K(t) for t = 0..length-1; every value clamped to [k_min, k_max].
Vec scenario_track(const Scenario& s);
// Single entry of the track; throws std::out_of_range outside [0, length).
double scenario_k(const Scenario& s, int t);

// Sequence logging: one controller step = n_trips round trips at fixed
// angles, then a measurement.
struct SequenceConfig {
  enum class Mode { kmap_oracle, frozen };
  Mode mode = Mode::kmap_oracle;
  double dither = 0.05;  // rad, iid on every angle (kmap_oracle)
  cavity::WaveplateAngles frozen_angles;
  int n_trips = 50;
};

// Runs the scenario once and logs (E, M, alpha, K_true) per step. In
// kmap_oracle mode the angles track km(K_true) plus seeded dither (the inner
// loop at its fixed point); frozen mode holds frozen_angles. Degenerate
// steps log E=0, M=1; divergence truncates the sequence.
mprnn::Sequence generate_sequence(const cavity::CavityParams& p, const Scenario& s,
                                  const kmap::KMapModel* km, const SequenceConfig& cfg,
                                  SeededRng& rng);

}  // namespace mlfl::datagen
