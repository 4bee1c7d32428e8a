// SPDX-License-Identifier: Apache-2.0
#include "mlfl/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "mlfl/errors.hpp"

namespace mlfl::controller {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

bool all_finite(const std::vector<Vec>& rows) {
  for (const auto& r : rows)
    for (double x : r)
      if (!std::isfinite(x)) return false;
  return true;
}

cavity::WaveplateAngles wrapped(const cavity::WaveplateAngles& a) {
  return {cavity::wrap_angle(a.a1), cavity::wrap_angle(a.a2), cavity::wrap_angle(a.a3),
          cavity::wrap_angle(a.ap)};
}

}  // namespace

void ControllerConfig::validate() const {
  if (iters_min < 1 || iters_max < iters_min)
    throw ConfigError("controller: need 0 < iters_min <= iters_max");
  if (!(err_threshold > 0.0)) throw ConfigError("controller: err_threshold must be positive");
  if (!(opt_lr > 0.0)) throw ConfigError("controller: opt_lr must be positive");
  if (!(iters_gain > 0.0)) throw ConfigError("controller: iters_gain must be positive");
  if (n_trips_per_step < 1) throw ConfigError("controller: n_trips_per_step must be positive");
  if (N < 1) throw ConfigError("controller: horizon must be positive");
}

const char* to_string(LoopTag tag) {
  switch (tag) {
    case LoopTag::inner: return "inner";
    case LoopTag::outer: return "outer";
    case LoopTag::uncontrolled: return "uncontrolled";
    case LoopTag::failed: return "failed";
  }
  return "?";
}

InnerStep inner_loop_step(const vae::VaeModel& v, const vae::LatentCalibration& calib,
                          const kmap::KMapModel& km, const cavity::Measurement& last,
                          const cavity::WaveplateAngles& last_angles, SeededRng& rng) {
  InnerStep out;
  if (!(last.E > 1e-12) || !std::isfinite(last.E) || !std::isfinite(last.M)) {
    out.degenerate = true;
    out.k_est = kNan;
    out.a = {rng.uniform(0.0, std::numbers::pi), rng.uniform(0.0, std::numbers::pi),
             rng.uniform(0.0, std::numbers::pi), rng.uniform(0.0, std::numbers::pi)};
    return out;
  }
  out.k_est = vae::infer_k(
      v, calib, {last.E, last.M, last_angles.a1, last_angles.a2, last_angles.a3, last_angles.ap});
  const auto a = kmap::kmap_forward(km, out.k_est);
  out.a = {a[0], a[1], a[2], a[3]};
  return out;
}

AscentResult ascend_controls(const Objective& objective, std::vector<Vec> init, int iters,
                             double lr) {
  AscentResult best;
  std::vector<Vec> cur = init;
  std::vector<Vec> grad;
  Vec per;
  double val = objective(cur, &grad, &per);
  best.controls = init;
  best.per_step = per;
  best.value = val;
  if (!std::isfinite(val)) return best;

  for (int it = 0; it < iters; ++it) {
    if (grad.size() != cur.size() || !all_finite(grad)) break;
    for (std::size_t k = 0; k < cur.size(); ++k)
      for (std::size_t j = 0; j < cur[k].size(); ++j) cur[k][j] += lr * grad[k][j];
    val = objective(cur, &grad, &per);
    best.iters_run = it + 1;
    if (!std::isfinite(val)) break;
    if (val > best.value) {
      best.value = val;
      best.controls = cur;
      best.per_step = per;
    }
  }
  return best;
}

Plan optimize_controls(const mprnn::MpRnnCellWeights& w, const mprnn::MpRnnConfig& mcfg,
                       const ControllerConfig& cfg, const mprnn::HistoryBuffer& history,
                       const kmap::KMapModel& km, double prev_err) {
  cfg.validate();
  mcfg.validate();
  if (cfg.N != mcfg.N)
    throw ConfigError("controller: planning horizon differs from the trained predictor");
  const auto N = static_cast<std::size_t>(mcfg.N);
  const std::size_t W = N + 2 * static_cast<std::size_t>(mcfg.b);
  const auto stream = history.last_std(W);
  const auto& stats = history.stats();
  const auto nv = static_cast<std::size_t>(mcfg.N_v);
  const auto nu = static_cast<std::size_t>(mcfg.N_u);

  // Angle-map proposals along the horizon seed the ascent.
  const auto prop =
      mprnn::rollout(w, mcfg, std::span<const Vec>(stream), &km, &stats, nullptr, nullptr);
  std::vector<Vec> init(N, Vec(nu));
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t j = 0; j < nu; ++j)
      init[k][j] = (prop.alpha_raw[k][j] - stats.mean[nv + j]) / stats.stddev[nv + j];

  auto grads = w;  // scratch for the backward pass, zeroed per call
  const auto destd = [&](double x, std::size_t col) {
    return x * stats.stddev[col] + stats.mean[col];
  };
  Objective objective = [&](const std::vector<Vec>& controls, std::vector<Vec>* grad,
                            Vec* per_step) {
    mprnn::RolloutTape tape;
    const auto res = mprnn::rollout(w, mcfg, std::span<const Vec>(stream), nullptr, nullptr,
                                    &controls, grad != nullptr ? &tape : nullptr);
    double sum = 0.0;
    std::vector<Vec> dv(N, Vec(nv, 0.0));
    if (per_step) per_step->assign(N, 0.0);
    for (std::size_t k = 0; k < N; ++k) {
      const double e = destd(res.v_hat[k][0], 0);
      const double m = destd(res.v_hat[k][1], 1);
      const double o = e / m;
      sum += o;
      if (per_step) (*per_step)[k] = o;
      dv[k][0] = stats.stddev[0] / m;
      dv[k][1] = -stats.stddev[1] * e / (m * m);
    }
    if (grad) {
      mprnn::zero_weights(grads);
      grad->clear();
      mprnn::rollout_backward(w, mcfg, tape, dv, Vec(N, 0.0), nullptr, grads, grad);
    }
    return sum;
  };

  const double ideal = cfg.iters_gain / (prev_err + 1e-6);
  const int iters = std::clamp(static_cast<int>(std::lround(std::min(ideal, 1e9))),
                               cfg.iters_min, cfg.iters_max);
  auto best = ascend_controls(objective, std::move(init), iters, cfg.opt_lr);

  Plan plan;
  plan.iters_run = best.iters_run;
  plan.controls.resize(N);
  for (std::size_t k = 0; k < N; ++k)
    plan.controls[k] = {destd(best.controls[k][0], nv), destd(best.controls[k][1], nv + 1),
                        destd(best.controls[k][2], nv + 2), destd(best.controls[k][3], nv + 3)};
  // One clean pass over the winning controls fills the predicted track.
  const auto res = mprnn::rollout(w, mcfg, std::span<const Vec>(stream), nullptr, nullptr,
                                  &best.controls, nullptr);
  plan.predicted_e.resize(N);
  plan.predicted_m.resize(N);
  plan.predicted_o.resize(N);
  plan.predicted_k.assign(res.k_hat.begin(), res.k_hat.end());
  for (std::size_t k = 0; k < N; ++k) {
    plan.predicted_e[k] = destd(res.v_hat[k][0], 0);
    plan.predicted_m[k] = destd(res.v_hat[k][1], 1);
    plan.predicted_o[k] = plan.predicted_e[k] / plan.predicted_m[k];
    plan.predicted_sum_o += plan.predicted_o[k];
  }
  return plan;
}

ControlTrace dlmpc_run(const cavity::CavityParams& p, const datagen::Scenario& scenario,
                       Models models, const ControllerConfig& cfg, SeededRng& rng,
                       const StepHook& hook) {
  cfg.validate();
  models.mcfg.validate();
  if (cfg.N != models.mcfg.N)
    throw ConfigError("controller: planning horizon differs from the trained predictor");
  const auto track = datagen::scenario_track(scenario);
  const std::size_t W =
      static_cast<std::size_t>(models.mcfg.N) + 2 * static_cast<std::size_t>(models.mcfg.b);

  cavity::CavitySimulator sim(p);
  auto field = sim.make_initial_field(rng);
  mprnn::HistoryBuffer history(W, models.stats);

  ControlTrace trace;
  trace.reserve(track.size());
  cavity::Measurement last_meas;
  cavity::WaveplateAngles last_angles;
  double k_est_last = scenario.k0;
  std::optional<Plan> plan;
  std::size_t plan_pos = 0;
  bool force_inner = false;
  Vec horizon_errs;
  double prev_err = 0.0;

  for (std::size_t t = 0; t < track.size(); ++t) {
    if (hook) hook(static_cast<int>(t), models);

    const auto close_plan = [&] {
      if (!horizon_errs.empty()) {
        prev_err = 0.0;
        for (double e : horizon_errs) prev_err += e;
        prev_err /= static_cast<double>(horizon_errs.size());
        horizon_errs.clear();
      }
      plan.reset();
      plan_pos = 0;
    };

    LoopTag tag = LoopTag::inner;
    cavity::WaveplateAngles a;
    double k_est = k_est_last;
    const bool warmup = t < W;
    if (warmup || force_inner) {
      close_plan();
      force_inner = false;
      if (trace.empty()) {
        // No measurement yet: best-known angles for the declared initial K.
        const auto a0 = kmap::kmap_forward(models.km, scenario.k0);
        a = {a0[0], a0[1], a0[2], a0[3]};
        k_est = scenario.k0;
      } else {
        const auto step = inner_loop_step(models.vae, models.calib, models.km, last_meas,
                                          last_angles, rng);
        a = wrapped(step.a);
        if (!step.degenerate) k_est = step.k_est;
      }
    } else {
      if (!plan || plan_pos >= plan->controls.size()) {
        close_plan();
        plan = optimize_controls(models.w, models.mcfg, cfg, history, models.km, prev_err);
      }
      tag = LoopTag::outer;
      a = wrapped(plan->controls[plan_pos]);
      if (std::isfinite(plan->predicted_k[plan_pos])) k_est = plan->predicted_k[plan_pos];
    }

    sim.set_k(track[t]);
    cavity::Measurement meas{0.0, 1.0, 0.0};
    try {
      meas = sim.run_to_measurement(field, a, cfg.n_trips_per_step);
    } catch (const DegenerateFieldError&) {
      meas = {0.0, 1.0, 0.0};
    } catch (const SolverDivergence&) {
      trace.push_back({static_cast<int>(t), track[t], k_est, a, kNan, kNan, kNan, kNan,
                       LoopTag::failed});
      return trace;
    }

    double pred_err = kNan;
    if (tag == LoopTag::outer) {
      const double de = plan->predicted_e[plan_pos] - meas.E;
      const double dm = plan->predicted_m[plan_pos] - meas.M;
      pred_err = std::sqrt(de * de + dm * dm) / std::sqrt(meas.E * meas.E + meas.M * meas.M);
      horizon_errs.push_back(pred_err);
      if (!(pred_err <= cfg.err_threshold)) force_inner = true;  // NaN also trips
      ++plan_pos;
    }

    trace.push_back(
        {static_cast<int>(t), track[t], k_est, a, meas.E, meas.M, meas.O, pred_err, tag});
    mprnn::StepRecord rec;
    rec.e = meas.E;
    rec.m = meas.M;
    rec.alpha = {a.a1, a.a2, a.a3, a.ap};
    rec.k = k_est;
    history.push(rec);
    last_meas = meas;
    last_angles = a;
    if (std::isfinite(k_est)) k_est_last = k_est;
  }
  return trace;
}

ControlTrace baseline_run(const cavity::CavityParams& p, const datagen::Scenario& scenario,
                          const cavity::WaveplateAngles& angles, const ControllerConfig& cfg,
                          SeededRng& rng) {
  cfg.validate();
  const auto track = datagen::scenario_track(scenario);
  cavity::CavitySimulator sim(p);
  auto field = sim.make_initial_field(rng);
  const auto a = wrapped(angles);

  ControlTrace trace;
  trace.reserve(track.size());
  for (std::size_t t = 0; t < track.size(); ++t) {
    sim.set_k(track[t]);
    cavity::Measurement meas{0.0, 1.0, 0.0};
    try {
      meas = sim.run_to_measurement(field, a, cfg.n_trips_per_step);
    } catch (const DegenerateFieldError&) {
      meas = {0.0, 1.0, 0.0};
    } catch (const SolverDivergence&) {
      trace.push_back({static_cast<int>(t), track[t], kNan, a, kNan, kNan, kNan, kNan,
                       LoopTag::failed});
      return trace;
    }
    trace.push_back({static_cast<int>(t), track[t], kNan, a, meas.E, meas.M, meas.O, kNan,
                     LoopTag::uncontrolled});
  }
  return trace;
}

}  // namespace mlfl::controller
