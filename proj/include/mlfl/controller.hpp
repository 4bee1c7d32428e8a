// SPDX-License-Identifier: Apache-2.0
// Closed-loop control of the simulated cavity: an inner loop infers the
// birefringence from the last measurement and looks up known-good angles; an
// outer loop plans N angle settings by gradient ascent of the predicted
// objective through the recurrent plant model, applies them step by step,
// and falls back to the inner loop when the prediction error exceeds the
// threshold.
#pragma once

#include <array>
#include <functional>
#include <vector>

#include "mlfl/cavity.hpp"
#include "mlfl/datagen.hpp"
#include "mlfl/kmap.hpp"
#include "mlfl/mprnn.hpp"
#include "mlfl/nn.hpp"
#include "mlfl/rng.hpp"
#include "mlfl/vae.hpp"

namespace mlfl::controller {

using nn::Vec;

struct ControllerConfig {
  double err_threshold = 0.2;  // relative prediction error that trips fallback
  double opt_lr = 0.02;
  int iters_min = 2;
  int iters_max = 50;
  double iters_gain = 1.0;  // iters = clamp(round(gain / (prev_err + 1e-6)))
  int n_trips_per_step = 50;
  int N = 10;  // planning horizon, must match the trained predictor

  void validate() const;  // throws ConfigError
};

enum class LoopTag { inner, outer, uncontrolled, failed };
const char* to_string(LoopTag tag);

// One controller step as logged. pred_err is NaN unless a planned step was
// applied; k_est is NaN when nothing estimated it.
struct TraceRow {
  int step = 0;
  double k_true = 0.0;
  double k_est = 0.0;
  cavity::WaveplateAngles a;
  double e = 0.0, m = 1.0, o = 0.0;
  double pred_err = 0.0;
  LoopTag loop = LoopTag::inner;
};
using ControlTrace = std::vector<TraceRow>;

// Everything the closed loop needs, as produced by the training pipeline.
struct Models {
  vae::VaeModel vae;
  vae::LatentCalibration calib;
  kmap::KMapModel km;
  mprnn::MpRnnConfig mcfg;
  mprnn::MpRnnCellWeights w;
  nn::Standardizer stats;  // record-stream standardizer from predictor training
};

struct InnerStep {
  cavity::WaveplateAngles a;
  double k_est = 0.0;
  bool degenerate = false;  // measurement unusable, angles are a re-search draw
};

// Infer K from the last raw (E, M, alpha) record and look up the angle map.
// A degenerate measurement (E ~ 0) skips inference and draws uniform
// re-search angles from rng instead.
InnerStep inner_loop_step(const vae::VaeModel& v, const vae::LatentCalibration& calib,
                          const kmap::KMapModel& km, const cavity::Measurement& last,
                          const cavity::WaveplateAngles& last_angles, SeededRng& rng);

// Gradient-ascent core, factored out so objectives can be stubbed. objective
// evaluates a control sequence and optionally fills the per-control gradient
// and the per-step values; ascend takes `iters` update steps of size lr and
// keeps the best-scoring iterate (the initial sequence counts). A nonfinite
// value or gradient aborts the ascent and the best finite iterate wins.
using Objective =
    std::function<double(const std::vector<Vec>& controls, std::vector<Vec>* grad, Vec* per_step)>;
struct AscentResult {
  std::vector<Vec> controls;
  Vec per_step;
  double value = 0.0;
  int iters_run = 0;
};
AscentResult ascend_controls(const Objective& objective, std::vector<Vec> init, int iters,
                             double lr);

// N planned angle settings (raw radians, unwrapped) plus their predicted
// raw-unit measurements along the horizon.
struct Plan {
  std::vector<cavity::WaveplateAngles> controls;
  Vec predicted_o, predicted_e, predicted_m, predicted_k;
  double predicted_sum_o = 0.0;
  int iters_run = 0;
};

// Receding-horizon planning: initialize the control window from the
// decoder's angle-map proposals, then ascend the predicted sum of O = E/M.
// prev_err sets the iteration budget through the adaptive rule.
Plan optimize_controls(const mprnn::MpRnnCellWeights& w, const mprnn::MpRnnConfig& mcfg,
                       const ControllerConfig& cfg, const mprnn::HistoryBuffer& history,
                       const kmap::KMapModel& km, double prev_err);

// Test seam: mutate the models at the start of a given step (fault injection).
using StepHook = std::function<void(int step, Models& models)>;

// Full closed-loop run over the scenario. The first N + 2b steps use the
// inner loop (step 0 seeds from the angle map at the scenario's declared
// K0); afterwards plans are applied step by step, replanning when exhausted,
// with a one-step inner fallback whenever the applied step's relative
// prediction error on (E, M) exceeds err_threshold. Simulator divergence
// appends a row tagged failed and stops. Deterministic given seeds.
ControlTrace dlmpc_run(const cavity::CavityParams& p, const datagen::Scenario& scenario,
                       Models models, const ControllerConfig& cfg, SeededRng& rng,
                       const StepHook& hook = nullptr);

// Frozen-angle reference: same simulator and schedule, no controller.
ControlTrace baseline_run(const cavity::CavityParams& p, const datagen::Scenario& scenario,
                          const cavity::WaveplateAngles& angles, const ControllerConfig& cfg,
                          SeededRng& rng);

}  // namespace mlfl::controller
