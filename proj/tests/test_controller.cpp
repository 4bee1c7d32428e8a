// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "mlfl/controller.hpp"
#include "mlfl/errors.hpp"
#include "support/helpers.hpp"
#include "support/teacher.hpp"

using namespace mlfl;
using controller::LoopTag;
using nn::Vec;

namespace {

constexpr double kPi = std::numbers::pi;

// VAE whose inference always returns k_const: zero weights leave the latent
// mean at its bias.
vae::VaeModel const_vae(double k_const) {
  vae::VaeModel m;
  m.stats = testing::identity_stats(6);
  m.encoder_trunk.layers = {nn::Dense(6, 4, nn::Act::relu)};
  m.enc_mu = nn::Dense(4, 2, nn::Act::linear);
  m.enc_log_var = nn::Dense(4, 2, nn::Act::linear);
  m.decoder.layers = {nn::Dense(2, 6, nn::Act::linear)};
  m.enc_mu.b[0] = k_const;
  return m;
}

vae::LatentCalibration unit_calib() { return {0, 1.0, 0.0, 1.0}; }

// Angle map whose output is a constant bias vector, any input.
kmap::KMapModel const_kmap(const std::array<double, 4>& bias) {
  kmap::KMapModel m;
  m.cfg.input_dim = 1;
  m.cfg.hidden = 2;
  m.in_stats = testing::identity_stats(1);
  m.net.layers = {nn::Dense(1, 2, nn::Act::relu), nn::Dense(2, 4, nn::Act::linear)};
  m.net.layers[1].b.assign(bias.begin(), bias.end());
  return m;
}

nn::Standardizer stream_stats() {
  nn::Standardizer s;
  s.mean = {2.0, 8.0, 1.5, 1.5, 1.5, 1.5};
  s.stddev = {1.0, 2.0, 1.0, 1.0, 1.0, 1.0};
  return s;
}

controller::Models stub_models(double k_const, const std::array<double, 4>& bias) {
  controller::Models m;
  m.vae = const_vae(k_const);
  m.calib = unit_calib();
  m.km = const_kmap(bias);
  m.mcfg.N = 3;
  m.mcfg.b = 2;
  m.mcfg.N_h = 4;
  m.mcfg.N_l = 4;
  SeededRng rng(71);
  m.w = mprnn::make_weights(m.mcfg, rng);
  mprnn::zero_weights(m.w);
  m.stats = stream_stats();
  return m;
}

controller::ControllerConfig fast_cfg() {
  controller::ControllerConfig cfg;
  cfg.N = 3;
  cfg.n_trips_per_step = 3;
  cfg.iters_max = 5;
  return cfg;
}

cavity::CavityParams fast_cavity() {
  cavity::CavityParams p;
  p.dz = 2e-3;
  return p;
}

bool rows_identical(const controller::ControlTrace& x, const controller::ControlTrace& y) {
  if (x.size() != y.size()) return false;
  auto same = [](double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || a == b;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& r = x[i];
    const auto& s = y[i];
    if (r.step != s.step || r.loop != s.loop) return false;
    if (!same(r.k_true, s.k_true) || !same(r.k_est, s.k_est)) return false;
    if (!same(r.a.a1, s.a.a1) || !same(r.a.a2, s.a.a2) || !same(r.a.a3, s.a.a3) ||
        !same(r.a.ap, s.a.ap))
      return false;
    if (!same(r.e, s.e) || !same(r.m, s.m) || !same(r.o, s.o) || !same(r.pred_err, s.pred_err))
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("controller config validation") {
  controller::ControllerConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.iters_min = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = controller::ControllerConfig{};
  cfg.iters_max = 1;
  cfg.iters_min = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = controller::ControllerConfig{};
  cfg.err_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("inner loop composes the inference with the angle map") {
  const auto v = const_vae(0.17);
  const auto calib = unit_calib();
  const auto km = const_kmap({0.3, 3.9, 1.1, 0.7});
  const cavity::Measurement meas{2.5, 9.0, 2.5 / 9.0};
  const cavity::WaveplateAngles last{0.4, 0.5, 0.6, 0.7};
  SeededRng rng(3);
  const auto step = controller::inner_loop_step(v, calib, km, meas, last, rng);
  CHECK_FALSE(step.degenerate);
  CHECK(step.k_est == doctest::Approx(0.17));
  CHECK(step.a.a1 == doctest::Approx(0.3));
  CHECK(step.a.a2 == doctest::Approx(3.9 - kPi));  // map output wraps into [0, pi)
  CHECK(step.a.a3 == doctest::Approx(1.1));
  CHECK(step.a.ap == doctest::Approx(0.7));

  SeededRng rng2(3);
  const auto again = controller::inner_loop_step(v, calib, km, meas, last, rng2);
  CHECK(again.k_est == step.k_est);
  CHECK(again.a.a1 == step.a.a1);
}

TEST_CASE("inner loop re-searches on a dead measurement") {
  const auto v = const_vae(0.17);
  const auto km = const_kmap({0.3, 0.9, 1.1, 0.7});
  const cavity::Measurement dead{0.0, 1.0, 0.0};
  SeededRng rng(9);
  const auto step = controller::inner_loop_step(v, unit_calib(), km, dead, {}, rng);
  CHECK(step.degenerate);
  CHECK(std::isnan(step.k_est));
  for (double a : {step.a.a1, step.a.a2, step.a.a3, step.a.ap}) {
    CHECK(a >= 0.0);
    CHECK(a < kPi);
  }
  SeededRng rng2(9);
  const auto again = controller::inner_loop_step(v, unit_calib(), km, dead, {}, rng2);
  CHECK(again.a.a1 == step.a.a1);
  CHECK(again.a.ap == step.a.ap);
}

TEST_CASE("repeated inner-loop steps settle to fixed angles") {
  // Small weights make the angle feedback a contraction.
  SeededRng rng(17);
  auto v = const_vae(0.0);
  v.encoder_trunk.layers = {nn::Dense(6, 8, nn::Act::relu)};
  xavier_init(v.encoder_trunk.layers[0].W, rng);
  v.enc_mu = nn::Dense(8, 2, nn::Act::linear);
  xavier_init(v.enc_mu.W, rng);
  for (auto& x : v.encoder_trunk.layers[0].W.d) x *= 0.05;
  for (auto& x : v.enc_mu.W.d) x *= 0.05;
  v.encoder_trunk.layers[0].b.assign(8, 0.2);

  kmap::KMapModel km;
  km.cfg.input_dim = 1;
  km.in_stats = testing::identity_stats(1);
  km.net = nn::make_mlp({1, 8, 4}, nn::Act::relu, nn::Act::linear, rng);
  for (auto& layer : km.net.layers)
    for (auto& x : layer.W.d) x *= 0.1;
  km.net.layers[1].b = {0.8, 1.2, 1.9, 0.6};

  const cavity::Measurement meas{2.1, 7.3, 2.1 / 7.3};
  cavity::WaveplateAngles a{1.0, 1.0, 1.0, 1.0};
  SeededRng step_rng(1);
  double change = 1.0;
  for (int i = 0; i < 6; ++i) {
    const auto step = controller::inner_loop_step(v, unit_calib(), km, meas, a, step_rng);
    REQUIRE_FALSE(step.degenerate);
    change = std::max({std::abs(step.a.a1 - a.a1), std::abs(step.a.a2 - a.a2),
                       std::abs(step.a.a3 - a.a3), std::abs(step.a.ap - a.ap)});
    a = step.a;
  }
  CHECK(change <= 1e-6);
}

TEST_CASE("gradient ascent climbs a quadratic bowl and keeps the best iterate") {
  const std::vector<Vec> target = {{0.4, -0.2}, {0.1, 0.3}};
  controller::Objective bowl = [&](const std::vector<Vec>& c, std::vector<Vec>* grad,
                                   Vec* per_step) {
    double f = 10.0;
    if (grad) grad->assign(2, Vec(2, 0.0));
    if (per_step) per_step->assign(2, 5.0);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 2; ++j) {
        const double d = c[k][j] - target[k][j];
        f -= d * d;
        if (per_step) (*per_step)[k] -= d * d;
        if (grad) (*grad)[k][j] = -2.0 * d;
      }
    return f;
  };

  const std::vector<Vec> init(2, Vec(2, 0.0));
  const auto res = controller::ascend_controls(bowl, init, 30, 0.2);
  CHECK(res.iters_run == 30);
  CHECK(res.value > bowl(init, nullptr, nullptr));
  CHECK(res.value == doctest::Approx(10.0).epsilon(1e-6));
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(std::abs(res.controls[k][j] - target[k][j]) < 1e-3);
  REQUIRE(res.per_step.size() == 2);
}

TEST_CASE("ascent keeps the start under zero gradient and aborts on nonfinite values") {
  controller::Objective flat = [](const std::vector<Vec>& c, std::vector<Vec>* grad, Vec* per) {
    if (grad) grad->assign(c.size(), Vec(c[0].size(), 0.0));
    if (per) per->assign(c.size(), 3.0);
    return 3.0;
  };
  const std::vector<Vec> init = {{0.5, -0.5}};
  const auto res = controller::ascend_controls(flat, init, 4, 0.1);
  CHECK(res.value == 3.0);
  CHECK(res.controls == init);
  CHECK(res.iters_run == 4);

  controller::Objective cliff = [](const std::vector<Vec>& c, std::vector<Vec>* grad, Vec* per) {
    if (grad) grad->assign(1, Vec(1, 1.0));
    if (per) per->assign(1, c[0][0]);
    return c[0][0] < 0.5 ? c[0][0] : std::numeric_limits<double>::quiet_NaN();
  };
  const std::vector<Vec> at_zero = {{0.0}};
  const auto res2 = controller::ascend_controls(cliff, at_zero, 10, 1.0);
  CHECK(res2.controls == at_zero);  // the only finite iterate seen
  CHECK(res2.value == 0.0);
  CHECK(res2.iters_run == 1);
}

TEST_CASE("planning with a constant predictor keeps the proposed controls") {
  auto models = stub_models(0.0, {0.3, 1.0, 2.2, 0.6});
  auto cfg = fast_cfg();
  cfg.iters_max = 7;
  mprnn::HistoryBuffer hist(7, models.stats);
  SeededRng rng(5);
  for (int i = 0; i < 7; ++i) {
    mprnn::StepRecord r;
    r.e = 2.0 + 0.1 * rng.normal();
    r.m = 8.0 + 0.1 * rng.normal();
    r.alpha = {1.4, 1.5, 1.6, 1.5};
    hist.push(r);
  }

  const auto plan =
      controller::optimize_controls(models.w, models.mcfg, cfg, hist, models.km, 1e12);
  CHECK(plan.iters_run == cfg.iters_min);  // huge error collapses the budget
  REQUIRE(plan.controls.size() == 3);
  for (const auto& a : plan.controls) {
    CHECK(a.a1 == doctest::Approx(0.3));  // zero gradients leave the proposal
    CHECK(a.a2 == doctest::Approx(1.0));
    CHECK(a.a3 == doctest::Approx(2.2));
    CHECK(a.ap == doctest::Approx(0.6));
  }
  // The constant predictor reports the destandardized record mean.
  for (int k = 0; k < 3; ++k) {
    CHECK(plan.predicted_e[static_cast<std::size_t>(k)] == doctest::Approx(2.0));
    CHECK(plan.predicted_m[static_cast<std::size_t>(k)] == doctest::Approx(8.0));
    CHECK(plan.predicted_o[static_cast<std::size_t>(k)] == doctest::Approx(0.25));
    CHECK(plan.predicted_k[static_cast<std::size_t>(k)] == 0.0);
  }
  CHECK(plan.predicted_sum_o == doctest::Approx(0.75));

  const auto eager =
      controller::optimize_controls(models.w, models.mcfg, cfg, hist, models.km, 0.0);
  CHECK(eager.iters_run == cfg.iters_max);  // accurate model earns the full budget
  CHECK(eager.predicted_sum_o >= plan.predicted_sum_o - 1e-12);

  controller::ControllerConfig wrong = cfg;
  wrong.N = 4;
  CHECK_THROWS_AS(controller::optimize_controls(models.w, models.mcfg, wrong, hist, models.km, 0.0),
                  ConfigError);
}

TEST_CASE("closed loop warms up inner and reproduces bitwise") {
  const auto p = fast_cavity();
  datagen::Scenario sc;
  sc.kind = datagen::Scenario::Kind::constant;
  sc.k0 = 0.0;
  sc.length = 20;
  const auto models = stub_models(0.0, {0.6, 2.2, 1.1, 0.3});
  const auto cfg = fast_cfg();

  SeededRng rng(101);
  const auto trace = controller::dlmpc_run(p, sc, models, cfg, rng);
  REQUIRE(trace.size() == 20);
  const std::size_t warmup = 3 + 2 * 2;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(trace[i].step == static_cast<int>(i));
    if (i < warmup) CHECK(trace[i].loop == LoopTag::inner);
    if (trace[i].loop == LoopTag::inner) CHECK(std::isnan(trace[i].pred_err));
    if (trace[i].loop == LoopTag::outer) CHECK(std::isfinite(trace[i].pred_err));
    if (trace[i].m != 0.0) CHECK(trace[i].o == doctest::Approx(trace[i].e / trace[i].m));
    // fallback guarantee: a missed prediction hands the next step to inner
    if (i + 1 < trace.size() && trace[i].loop == LoopTag::outer &&
        trace[i].pred_err > cfg.err_threshold)
      CHECK(trace[i + 1].loop == LoopTag::inner);
  }
  CHECK(std::any_of(trace.begin(), trace.end(),
                    [](const auto& r) { return r.loop == LoopTag::outer; }));

  SeededRng rng2(101);
  const auto replay = controller::dlmpc_run(p, sc, models, cfg, rng2);
  CHECK(rows_identical(trace, replay));

  datagen::Scenario empty = sc;
  empty.length = 0;
  SeededRng rng3(101);
  CHECK(controller::dlmpc_run(p, empty, models, cfg, rng3).empty());
}

TEST_CASE("corrupted predictor forces an inner fallback within one horizon") {
  const auto p = fast_cavity();
  datagen::Scenario sc;
  sc.kind = datagen::Scenario::Kind::constant;
  sc.length = 20;
  const auto models = stub_models(0.0, {0.6, 2.2, 1.1, 0.3});
  auto cfg = fast_cfg();
  cfg.err_threshold = 1e9;  // nominal mispredictions stay under the bar

  const std::size_t warmup = 3 + 2 * 2;
  const int corrupt_at = static_cast<int>(warmup) + 4;
  controller::StepHook hook = [&](int step, controller::Models& m) {
    if (step == corrupt_at) m.w.W_o.d[0] = 1e308;
  };
  SeededRng rng(102);
  const auto trace = controller::dlmpc_run(p, sc, models, cfg, rng, hook);
  REQUIRE(trace.size() == 20);
  for (std::size_t i = warmup; i <= static_cast<std::size_t>(corrupt_at); ++i)
    CHECK(trace[i].loop == LoopTag::outer);
  bool fell_back = false;
  for (std::size_t i = static_cast<std::size_t>(corrupt_at) + 1;
       i < std::min<std::size_t>(trace.size(), static_cast<std::size_t>(corrupt_at) + 5); ++i)
    fell_back = fell_back || trace[i].loop == LoopTag::inner;
  CHECK(fell_back);
}

TEST_CASE("baseline run freezes the angles") {
  const auto p = fast_cavity();
  datagen::Scenario sc;
  sc.kind = datagen::Scenario::Kind::sinusoidal;
  sc.k0 = 0.0;
  sc.dk = 0.05;
  sc.period = 8.0;
  sc.length = 6;
  controller::ControllerConfig cfg;
  cfg.n_trips_per_step = 3;
  SeededRng rng(103);
  const auto trace =
      controller::baseline_run(p, sc, {0.6, 2.2 + kPi, 1.1, 0.3}, cfg, rng);
  REQUIRE(trace.size() == 6);
  for (const auto& r : trace) {
    CHECK(r.loop == LoopTag::uncontrolled);
    CHECK(r.a.a1 == doctest::Approx(0.6));
    CHECK(r.a.a2 == doctest::Approx(2.2));  // applied angles are wrapped
    CHECK(std::isnan(r.k_est));
    CHECK(std::isnan(r.pred_err));
    if (r.m != 0.0) CHECK(r.o == doctest::Approx(r.e / r.m));
  }
  CHECK(trace[2].k_true == doctest::Approx(0.05));  // quarter period hits the peak
}
