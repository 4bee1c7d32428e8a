// SPDX-License-Identifier: Apache-2.0
// Variational autoencoder over measurement records (E, M, a1..a4) with a
// 2-dimensional latent space. Training is unsupervised; a separate affine
// calibration fitted on held-out labeled data turns the best-correlated
// latent dimension into a birefringence estimate.
#pragma once

#include <optional>
#include <vector>

#include "mlfl/nn.hpp"
#include "mlfl/rng.hpp"

namespace mlfl::vae {

using nn::Vec;

inline constexpr int kInputDim = 6;
inline constexpr int kLatentDim = 2;
inline constexpr double kLogVarClamp = 10.0;

using nn::Standardizer;

struct VaeConfig {
  int hidden = 32;       // two hidden layers this wide on each side
  int epochs = 60;
  int batch = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.25;  // tail fraction reserved for calibration
  double r_threshold = 0.9;        // minimum |pearson r| for a valid calibration
};

struct Encoded {
  Vec mu;       // latent mean
  Vec log_var;  // clamped to [-kLogVarClamp, kLogVarClamp]
  bool outlier = false;  // any standardized input component beyond 10 sigma
};

struct VaeModel {
  Standardizer stats;
  nn::Mlp encoder_trunk;   // input -> hidden
  nn::Dense enc_mu;        // hidden -> latent
  nn::Dense enc_log_var;   // hidden -> latent
  nn::Mlp decoder;         // latent -> input
};

// x_raw is a raw (unstandardized) record.
Encoded encode(const VaeModel& m, const Vec& x_raw);
Vec decode(const VaeModel& m, const Vec& z);

// KL(q || N(0,I)) for a diagonal Gaussian.
double kl_gauss(const Vec& mu, const Vec& log_var);

// Reconstruction + KL for one standardized sample and fixed noise draw.
double vae_loss(const VaeModel& m, const Vec& x_std, const Vec& eps);

struct LatentCalibration {
  int dim_index = 0;
  double scale = 1.0;
  double offset = 0.0;
  double pearson_r = 0.0;
};

struct TrainResult {
  VaeModel model;
  std::optional<LatentCalibration> calibration;  // empty when |r| < threshold
  double best_abs_r = 0.0;
  Vec r_by_dim;            // pearson r of each latent dim on the holdout
  Vec loss_by_epoch;       // mean training loss per epoch
};

// Unsupervised fit on the leading (1 - holdout_fraction) of the records; the
// k labels are touched only by the calibration pass on the holdout tail.
TrainResult train_vae(const std::vector<Vec>& records_raw, const std::vector<double>& k_true,
                      const VaeConfig& cfg, SeededRng& rng);

// Deterministic estimate: affine map of the calibrated latent mean.
double infer_k(const VaeModel& m, const LatentCalibration& c, const Vec& x_raw);

// Flat views of every parameter in a fixed order, and the analytic gradient
// of vae_loss in the same order; the gradient-check tests drive these.
nn::ParamRefs vae_param_refs(VaeModel& m);
double vae_loss_with_grads(VaeModel& m, const Vec& x_std, const Vec& eps,
                           std::vector<Vec>& grads_out);

}  // namespace mlfl::vae
