// SPDX-License-Identifier: Apache-2.0
// Network mapping a birefringence estimate to the four waveplate/polarizer
// angles of the best-known mode-locked state. Trained on a small subset of
// sweep records: the highest-objective record near each of n equidistant
// birefringence centers. Targets live on a continuous branch during training
// and outputs are wrapped mod pi on use.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mlfl/nn.hpp"
#include "mlfl/rng.hpp"

namespace mlfl::kmap {

using nn::Vec;

inline constexpr int kNumAngles = 4;

struct SweepEntry {
  double k = 0.0;
  std::array<double, 4> alpha{};  // a1, a2, a3, ap
  double o = 0.0;
};

struct TrainingSubset {
  struct Entry {
    double k = 0.0;
    std::array<double, 4> alpha{};
    double o = 0.0;
    std::size_t source_index = 0;  // position in the sweep span
  };
  std::vector<Entry> entries;        // one per non-empty window, center order
  std::vector<double> centers_used;  // parallel to entries
  int n_empty = 0;                   // windows holding no record
};

// Best record (highest O, ties to the lowest source index) within +-delta_k
// of each of n equidistant centers spanning [k_min, k_max] inclusive.
// Throws DataError on an empty sweep or when every window is empty.
TrainingSubset select_training_subset(std::span<const SweepEntry> sweep, double k_min,
                                      double k_max, int n, double delta_k);

// Angle in [0, pi).
double wrap_angle(double a);

// Per-entry targets aligned to a continuous branch: each angle is its wrapped
// value plus the integer multiple of pi closest to the previous entry's
// target, so adjacent targets never jump by the wrap seam.
std::vector<Vec> continuous_targets(const TrainingSubset& subset);

struct KMapConfig {
  int hidden = 16;  // two hidden relu layers this wide
  int epochs = 4000;
  double lr = 3e-3;
  int input_dim = 1;  // 1: scalar birefringence estimate; 2: raw latent mean
};

struct KMapModel {
  KMapConfig cfg;
  nn::Standardizer in_stats;  // fitted on the training inputs
  nn::Mlp net;                // input_dim -> hidden -> hidden -> 4
};

struct KMapTrainReport {
  Vec loss_by_epoch;  // mean over entries of 0.5 |y_hat - y|^2
  double final_loss = 0.0;
};

// Full-batch Adam on generic (input, target) pairs; used directly for latent
// inputs and via the subset overload for the scalar path.
KMapTrainReport train_kmap(KMapModel& m, const std::vector<Vec>& inputs,
                           const std::vector<Vec>& targets, const KMapConfig& cfg,
                           SeededRng& rng);
KMapTrainReport train_kmap(KMapModel& m, const TrainingSubset& subset,
                           const KMapConfig& cfg, SeededRng& rng);

// Wrapped angles for a scalar estimate; requires input_dim == 1.
std::array<double, 4> kmap_forward(const KMapModel& m, double k);

// Unwrapped branch values for a generic input.
Vec kmap_forward_raw(const KMapModel& m, const Vec& input);

// Differentiable path for the predictor: weights stay frozen, only the input
// gradient flows. Wrapping has unit derivative almost everywhere, so the
// backward pass is the same for wrapped and raw outputs.
struct KMapCache {
  std::vector<nn::DenseCache> layers;
};
Vec kmap_forward_cached(const KMapModel& m, const Vec& input, KMapCache& cache);
Vec kmap_backward_input(const KMapModel& m, const KMapCache& cache, const Vec& dalpha);

}  // namespace mlfl::kmap
