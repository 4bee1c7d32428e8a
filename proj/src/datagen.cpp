// SPDX-License-Identifier: Apache-2.0
#include "mlfl/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "mlfl/errors.hpp"

namespace mlfl::datagen {

Vec grid(double lo, double hi, int n, bool end_open) {
  if (n < 1) throw ConfigError("datagen: grid needs at least one point");
  if (!(hi > lo)) throw ConfigError("datagen: grid bounds must be increasing");
  Vec g(static_cast<std::size_t>(n));
  const double denom = end_open ? n : std::max(n - 1, 1);
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / denom;
  if (!end_open && n > 1) g.back() = hi;  // exact endpoint, no rounding dust
  return g;
}

std::vector<SweepRecord> sweep(const Vec& k_grid, const Vec& alpha_grid,
                               const cavity::CavityParams& p, int n_trips, SeededRng& rng) {
  if (k_grid.empty() || alpha_grid.empty()) throw DataError("datagen sweep: empty grid");
  if (n_trips < 1) throw ConfigError("datagen sweep: n_trips must be positive");

  const auto f0 = cavity::initial_field(p, rng);
  const auto na = alpha_grid.size();
  const auto total = k_grid.size() * na * na * na * na;
  std::vector<SweepRecord> rows(total);

  // Grid-index order: K slowest, polarizer fastest. Slots are preassigned,
  // so the result is identical however the points are scheduled.
  auto point = [&](std::size_t idx, cavity::CavitySimulator& sim) {
    std::size_t rem = idx;
    const std::size_t ip = rem % na;
    rem /= na;
    const std::size_t i3 = rem % na;
    rem /= na;
    const std::size_t i2 = rem % na;
    rem /= na;
    const std::size_t i1 = rem % na;
    const std::size_t ik = rem / na;

    SweepRecord r;
    r.k = k_grid[ik];
    r.a = {alpha_grid[i1], alpha_grid[i2], alpha_grid[i3], alpha_grid[ip]};
    r.n_trips = n_trips;
    r.seed = rng.seed();
    sim.set_k(r.k);
    auto f = f0;
    try {
      const auto m = sim.run_to_measurement(f, r.a, n_trips);
      r.e = m.E;
      r.m = m.M;
      r.o = m.O;
    } catch (const DegenerateFieldError&) {
      r.degenerate = true;
    } catch (const SolverDivergence&) {
      r.degenerate = true;
    }
    rows[idx] = r;
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const auto n_workers = std::min<std::size_t>(hw, total);
  if (n_workers <= 1) {
    cavity::CavitySimulator sim(p);
    for (std::size_t i = 0; i < total; ++i) point(i, sim);
    return rows;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(n_workers);
  for (std::size_t t = 0; t < n_workers; ++t)
    pool.emplace_back([&] {
      cavity::CavitySimulator sim(p);
      for (std::size_t i = next.fetch_add(1); i < total; i = next.fetch_add(1)) point(i, sim);
    });
  for (auto& th : pool) th.join();
  return rows;
}

std::vector<kmap::SweepEntry> to_sweep_entries(const std::vector<SweepRecord>& rows) {
  std::vector<kmap::SweepEntry> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.degenerate) continue;
    out.push_back({r.k, {r.a.a1, r.a.a2, r.a.a3, r.a.ap}, r.o});
  }
  return out;
}

void Scenario::validate() const {
  if (length < 0) throw ConfigError("scenario: negative length");
  if (!(k_max > k_min)) throw ConfigError("scenario: K bounds must be increasing");
  if (kind == Kind::sinusoidal && !(period > 0.0))
    throw ConfigError("scenario: sinusoidal needs a positive period");
  if (kind == Kind::random_walk && !(step_sigma >= 0.0))
    throw ConfigError("scenario: negative step size");
}

Vec scenario_track(const Scenario& s) {
  s.validate();
  const auto clamp = [&](double k) { return std::clamp(k, s.k_min, s.k_max); };
  Vec track(static_cast<std::size_t>(s.length));
  switch (s.kind) {
    case Scenario::Kind::constant:
      std::fill(track.begin(), track.end(), clamp(s.k0));
      break;
    case Scenario::Kind::sinusoidal:
      for (int t = 0; t < s.length; ++t)
        track[static_cast<std::size_t>(t)] =
            clamp(s.k0 + s.dk * std::sin(2.0 * std::numbers::pi * t / s.period));
      break;
    case Scenario::Kind::random_walk: {
      SeededRng rng(s.seed);
      double k = clamp(s.k0);
      for (int t = 0; t < s.length; ++t) {
        track[static_cast<std::size_t>(t)] = k;
        k = clamp(k + s.step_sigma * rng.normal());
      }
      break;
    }
  }
  return track;
}

double scenario_k(const Scenario& s, int t) {
  if (t < 0 || t >= s.length) throw std::out_of_range("scenario: step outside the schedule");
  return scenario_track(s)[static_cast<std::size_t>(t)];
}

mprnn::Sequence generate_sequence(const cavity::CavityParams& p, const Scenario& s,
                                  const kmap::KMapModel* km, const SequenceConfig& cfg,
                                  SeededRng& rng) {
  if (cfg.mode == SequenceConfig::Mode::kmap_oracle && km == nullptr)
    throw std::invalid_argument("datagen sequence: oracle mode needs a birefringence map");
  if (cfg.n_trips < 1) throw ConfigError("datagen sequence: n_trips must be positive");
  const auto track = scenario_track(s);

  cavity::CavitySimulator sim(p);
  auto f = sim.make_initial_field(rng);
  mprnn::Sequence seq;
  seq.reserve(track.size());
  for (std::size_t t = 0; t < track.size(); ++t) {
    sim.set_k(track[t]);
    cavity::WaveplateAngles a = cfg.frozen_angles;
    if (cfg.mode == SequenceConfig::Mode::kmap_oracle) {
      const auto prop = kmap::kmap_forward(*km, track[t]);
      a = {prop[0], prop[1], prop[2], prop[3]};
      a.a1 += cfg.dither * rng.normal();
      a.a2 += cfg.dither * rng.normal();
      a.a3 += cfg.dither * rng.normal();
      a.ap += cfg.dither * rng.normal();
    }
    a.a1 = cavity::wrap_angle(a.a1);
    a.a2 = cavity::wrap_angle(a.a2);
    a.a3 = cavity::wrap_angle(a.a3);
    a.ap = cavity::wrap_angle(a.ap);

    mprnn::StepRecord rec;
    rec.alpha = {a.a1, a.a2, a.a3, a.ap};
    rec.k = track[t];
    try {
      const auto m = sim.run_to_measurement(f, a, cfg.n_trips);
      rec.e = m.E;
      rec.m = m.M;
    } catch (const DegenerateFieldError&) {
      rec.e = 0.0;
      rec.m = 1.0;
    } catch (const SolverDivergence&) {
      break;  // truncated run, callers see the shorter sequence
    }
    seq.push_back(rec);
  }
  return seq;
}

}  // namespace mlfl::datagen
