// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "mlfl/errors.hpp"
#include "mlfl/kmap.hpp"
#include "support/helpers.hpp"

using namespace mlfl;
using kmap::SweepEntry;
using nn::Vec;

namespace {

constexpr double kPi = std::numbers::pi;

double ang_dist(double a, double b) {
  const double d = std::abs(kmap::wrap_angle(a) - kmap::wrap_angle(b));
  return std::min(d, kPi - d);
}

// Smooth per-angle schedules whose raw lines cross the wrap seam.
std::array<double, 4> smooth_alpha(double k) {
  return {kmap::wrap_angle(0.05 + 2.5 * k), kmap::wrap_angle(1.2 - 1.8 * k),
          kmap::wrap_angle(3.0 + 2.2 * k), kmap::wrap_angle(0.4 + 0.9 * k)};
}

kmap::TrainingSubset smooth_subset(int n_centers) {
  std::vector<SweepEntry> sweep;
  for (int c = 0; c < n_centers; ++c) {
    const double k = -0.3 + 0.6 * static_cast<double>(c) / (n_centers - 1);
    sweep.push_back({k, smooth_alpha(k), 1.0});
  }
  return kmap::select_training_subset(sweep, -0.3, 0.3, n_centers, 1e-6);
}

}  // namespace

TEST_CASE("wrap_angle maps any angle onto [0, pi)") {
  CHECK(kmap::wrap_angle(0.0) == doctest::Approx(0.0));
  CHECK(kmap::wrap_angle(kPi) == doctest::Approx(0.0));
  CHECK(kmap::wrap_angle(2.0 * kPi) == doctest::Approx(0.0));
  CHECK(kmap::wrap_angle(-0.1) == doctest::Approx(kPi - 0.1));
  CHECK(kmap::wrap_angle(1.5 * kPi) == doctest::Approx(0.5 * kPi));
  CHECK(kmap::wrap_angle(-7.25 * kPi) == doctest::Approx(0.75 * kPi));
  SeededRng rng(11);
  for (int i = 0; i < 200; ++i) {
    const double a = 40.0 * (rng.uniform01() - 0.5);
    const double w = kmap::wrap_angle(a);
    CHECK(w >= 0.0);
    CHECK(w < kPi);
    CHECK(std::abs(std::remainder(a - w, kPi)) < 1e-9);
  }
}

TEST_CASE("subset selection keeps the max-objective record near each center") {
  // Centers 0, 0.5, 1 with half-width 0.1. The middle window holds a
  // three-way objective tie; the last window holds nothing.
  std::vector<SweepEntry> sweep = {
      {0.05, {0.1, 0.2, 0.3, 0.4}, 2.0}, {0.02, {0.5, 0.6, 0.7, 0.8}, 5.0},
      {0.48, {1.0, 1.1, 1.2, 1.3}, 1.0}, {0.55, {2.0, 2.1, 2.2, 2.3}, 1.0},
      {0.52, {3.0, 3.1, 3.2, 3.3}, 1.0},
  };
  const auto sub = kmap::select_training_subset(sweep, 0.0, 1.0, 3, 0.1);
  REQUIRE(sub.entries.size() == 2);
  CHECK(sub.entries[0].source_index == 1);
  CHECK(sub.entries[0].o == doctest::Approx(5.0));
  CHECK(sub.entries[1].source_index == 2);  // tie resolved to the lowest index
  CHECK(sub.n_empty == 1);
  REQUIRE(sub.centers_used.size() == 2);
  CHECK(sub.centers_used[0] == doctest::Approx(0.0));
  CHECK(sub.centers_used[1] == doctest::Approx(0.5));
}

TEST_CASE("subset selection agrees with a brute-force scan") {
  SeededRng rng(404);
  std::vector<SweepEntry> sweep;
  for (int i = 0; i < 300; ++i) {
    SweepEntry e;
    e.k = -0.35 + 0.7 * rng.uniform01();
    for (auto& a : e.alpha) a = kPi * rng.uniform01();
    e.o = 10.0 * rng.uniform01();
    sweep.push_back(e);
  }
  const int n = 13;
  const double k_min = -0.3, k_max = 0.3, delta = 0.025;
  const auto sub = kmap::select_training_subset(sweep, k_min, k_max, n, delta);

  std::vector<std::size_t> expect;
  for (int c = 0; c < n; ++c) {
    const double center = k_min + (k_max - k_min) * c / double(n - 1);
    std::size_t best = sweep.size();
    for (std::size_t i = 0; i < sweep.size(); ++i)
      if (std::abs(sweep[i].k - center) <= delta &&
          (best == sweep.size() || sweep[i].o > sweep[best].o))
        best = i;
    if (best != sweep.size()) expect.push_back(best);
  }
  REQUIRE(sub.entries.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(sub.entries[i].source_index == expect[i]);
}

TEST_CASE("subset selection rejects degenerate requests") {
  std::vector<SweepEntry> sweep = {{0.0, {}, 1.0}};
  CHECK_THROWS_AS(kmap::select_training_subset({}, 0.0, 1.0, 3, 0.1), DataError);
  CHECK_THROWS_AS(kmap::select_training_subset(sweep, 5.0, 6.0, 3, 0.1), DataError);
  CHECK_THROWS_AS(kmap::select_training_subset(sweep, 0.0, 1.0, 1, 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(kmap::select_training_subset(sweep, 0.0, 1.0, 3, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(kmap::select_training_subset(sweep, 1.0, 1.0, 3, 0.1),
                  std::invalid_argument);
}

TEST_CASE("continuous targets never jump across the wrap seam") {
  const auto sub = smooth_subset(13);
  const auto targets = kmap::continuous_targets(sub);
  REQUIRE(targets.size() == sub.entries.size());
  for (int j = 0; j < 4; ++j) {
    CHECK(targets[0][j] >= 0.0);
    CHECK(targets[0][j] < kPi);
  }
  bool left_principal_branch = false;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (int j = 0; j < 4; ++j) {
      // Same angle mod pi as the stored record.
      CHECK(std::abs(std::remainder(targets[i][j] - sub.entries[i].alpha[j], kPi)) < 1e-9);
      if (i > 0) CHECK(std::abs(targets[i][j] - targets[i - 1][j]) < 0.5 * kPi);
      if (targets[i][j] < 0.0 || targets[i][j] >= kPi) left_principal_branch = true;
    }
  }
  // The schedules cross the seam, so branch reconstruction must have engaged.
  CHECK(left_principal_branch);
}

TEST_CASE("a single record is fit to machine-level loss") {
  kmap::TrainingSubset sub;
  sub.entries.push_back({0.12, {0.3, 1.1, 2.9, 0.7}, 4.0, 0});
  sub.centers_used.push_back(0.12);
  kmap::KMapConfig cfg;
  SeededRng rng(7);
  kmap::KMapModel m;
  const auto rep = kmap::train_kmap(m, sub, cfg, rng);
  CHECK(rep.final_loss <= 1e-6);
  const auto a = kmap::kmap_forward(m, 0.12);
  for (int j = 0; j < 4; ++j) CHECK(ang_dist(a[j], sub.entries[0].alpha[j]) < 1e-3);

  SeededRng rng2(7);
  kmap::KMapModel m2;
  const auto rep2 = kmap::train_kmap(m2, sub, cfg, rng2);
  CHECK(rep2.final_loss == rep.final_loss);  // bitwise-deterministic training
}

TEST_CASE("training recovers smooth angle schedules across the seam") {
  const auto sub = smooth_subset(13);
  kmap::KMapConfig cfg;
  SeededRng rng(21);
  kmap::KMapModel m;
  const auto rep = kmap::train_kmap(m, sub, cfg, rng);
  CHECK(rep.final_loss <= 1e-3);
  CHECK(rep.loss_by_epoch.front() > rep.final_loss);

  // Interpolation at fresh birefringence values, compared mod pi.
  for (double k = -0.28; k <= 0.28; k += 0.04) {
    const auto pred = kmap::kmap_forward(m, k);
    const auto truth = smooth_alpha(k);
    for (int j = 0; j < 4; ++j) {
      CHECK(pred[j] >= 0.0);
      CHECK(pred[j] < kPi);
      CHECK(ang_dist(pred[j], truth[j]) < 0.08);
    }
  }

  // The raw branch actually leaves [0, pi), so wrapping is load-bearing.
  bool raw_outside = false;
  for (double k = -0.3; k <= 0.3; k += 0.01) {
    const Vec raw = kmap::kmap_forward_raw(m, {k});
    for (int j = 0; j < 4; ++j) {
      if (raw[j] < 0.0 || raw[j] >= kPi) raw_outside = true;
      CHECK(kmap::wrap_angle(raw[j]) == doctest::Approx(kmap::kmap_forward(m, k)[j]));
    }
  }
  CHECK(raw_outside);
}

TEST_CASE("input gradient matches central differences") {
  const auto sub = smooth_subset(13);
  kmap::KMapConfig cfg;
  cfg.epochs = 40;  // partially trained weights, generic position
  SeededRng rng(33);
  kmap::KMapModel m;
  kmap::train_kmap(m, sub, cfg, rng);

  const Vec w = {0.7, -1.3, 0.4, 2.1};  // fixed probe direction
  auto probe = [&](double k) {
    const Vec raw = kmap::kmap_forward_raw(m, {k});
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += w[j] * raw[j];
    return s;
  };
  const double k0 = 0.123;
  kmap::KMapCache cache;
  kmap::kmap_forward_cached(m, {k0}, cache);
  const Vec dk = kmap::kmap_backward_input(m, cache, w);
  REQUIRE(dk.size() == 1);
  const double h = 1e-5;
  const double num = (probe(k0 + h) - probe(k0 - h)) / (2.0 * h);
  CHECK(testing::rel_err(dk[0], num) < 1e-6);
}

TEST_CASE("latent-width inputs train through the generic interface") {
  SeededRng rng(55);
  std::vector<Vec> inputs, targets;
  for (int i = 0; i < 40; ++i) {
    const double a = 2.0 * rng.uniform01() - 1.0, b = 2.0 * rng.uniform01() - 1.0;
    inputs.push_back({a, b});
    targets.push_back({0.5 + 0.4 * a, 1.0 - 0.3 * b, 2.0 + 0.2 * a * b, 0.8 + 0.1 * a});
  }
  kmap::KMapConfig cfg;
  cfg.input_dim = 2;
  cfg.epochs = 600;
  kmap::KMapModel m;
  const auto rep = kmap::train_kmap(m, inputs, targets, cfg, rng);
  CHECK(rep.final_loss < 1e-3);
  CHECK_THROWS_AS(kmap::kmap_forward(m, 0.1), std::invalid_argument);
  CHECK(kmap::kmap_forward_raw(m, inputs[0]).size() == 4);

  // Width mismatches are rejected up front.
  kmap::KMapModel m2;
  CHECK_THROWS_AS(kmap::train_kmap(m2, inputs, targets, kmap::KMapConfig{}, rng), DataError);
}
