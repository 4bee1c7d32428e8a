// SPDX-License-Identifier: Apache-2.0
#include "mlfl/kmap.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "mlfl/errors.hpp"

namespace mlfl::kmap {

using nn::DenseGrad;
using nn::ParamRefs;

namespace {

constexpr double kPi = std::numbers::pi;

ParamRefs param_refs(KMapModel& m) {
  ParamRefs p;
  for (auto& l : m.net.layers) {
    p.emplace_back(l.W.d);
    p.emplace_back(l.b);
  }
  return p;
}

}  // namespace

double wrap_angle(double a) {
  double w = std::fmod(a, kPi);
  if (w < 0.0) w += kPi;
  return w;
}

TrainingSubset select_training_subset(std::span<const SweepEntry> sweep, double k_min,
                                      double k_max, int n, double delta_k) {
  if (sweep.empty()) throw DataError("kmap subset: empty sweep");
  if (n < 2) throw std::invalid_argument("kmap subset: need at least two centers");
  if (!(delta_k > 0.0)) throw std::invalid_argument("kmap subset: delta_k must be positive");
  if (!(k_max > k_min)) throw std::invalid_argument("kmap subset: k_max must exceed k_min");

  TrainingSubset out;
  const double step = (k_max - k_min) / static_cast<double>(n - 1);
  for (int c = 0; c < n; ++c) {
    const double center = k_min + step * static_cast<double>(c);
    std::size_t best = sweep.size();
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      if (std::abs(sweep[i].k - center) > delta_k) continue;
      if (best == sweep.size() || sweep[i].o > sweep[best].o) best = i;
    }
    if (best == sweep.size()) {
      ++out.n_empty;
      continue;
    }
    out.entries.push_back({sweep[best].k, sweep[best].alpha, sweep[best].o, best});
    out.centers_used.push_back(center);
  }
  if (out.entries.empty()) throw DataError("kmap subset: every center window is empty");
  return out;
}

std::vector<Vec> continuous_targets(const TrainingSubset& subset) {
  std::vector<Vec> targets;
  targets.reserve(subset.entries.size());
  for (const auto& e : subset.entries) {
    Vec t(kNumAngles);
    for (int j = 0; j < kNumAngles; ++j) {
      t[j] = wrap_angle(e.alpha[j]);
      if (!targets.empty()) {
        const double prev = targets.back()[j];
        t[j] += kPi * std::round((prev - t[j]) / kPi);
      }
    }
    targets.push_back(std::move(t));
  }
  return targets;
}

KMapTrainReport train_kmap(KMapModel& m, const std::vector<Vec>& inputs,
                           const std::vector<Vec>& targets, const KMapConfig& cfg,
                           SeededRng& rng) {
  if (inputs.empty() || inputs.size() != targets.size())
    throw DataError("kmap train: empty or mismatched inputs/targets");
  for (const auto& x : inputs)
    if (x.size() != static_cast<std::size_t>(cfg.input_dim))
      throw DataError("kmap train: input width does not match input_dim");

  m.cfg = cfg;
  m.in_stats = nn::Standardizer::fit(inputs);
  const std::size_t H = static_cast<std::size_t>(cfg.hidden);
  m.net = nn::make_mlp({static_cast<std::size_t>(cfg.input_dim), H, H, kNumAngles},
                       nn::Act::relu, nn::Act::linear, rng);

  std::vector<Vec> x_std(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) x_std[i] = m.in_stats.apply(inputs[i]);

  auto params = param_refs(m);
  nn::Adam opt(params, {.lr = cfg.lr});
  auto grads = nn::make_grads(m.net);
  const double inv_n = 1.0 / static_cast<double>(inputs.size());

  KMapTrainReport rep;
  rep.loss_by_epoch.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& g : grads) g.zero();
    double loss = 0.0;
    for (std::size_t i = 0; i < x_std.size(); ++i) {
      std::vector<nn::DenseCache> caches;
      Vec y = m.net.forward_cached(x_std[i], caches);
      Vec dy(kNumAngles);
      for (int j = 0; j < kNumAngles; ++j) {
        const double r = y[j] - targets[i][j];
        loss += 0.5 * r * r * inv_n;
        dy[j] = r * inv_n;
      }
      m.net.backward(caches, dy, &grads);
    }
    std::vector<Vec> flat;
    for (auto& g : grads) {
      flat.push_back(g.dW.d);
      flat.push_back(g.db);
    }
    opt.step(params, flat);
    rep.loss_by_epoch.push_back(loss);
  }
  rep.final_loss = rep.loss_by_epoch.empty() ? 0.0 : rep.loss_by_epoch.back();
  return rep;
}

KMapTrainReport train_kmap(KMapModel& m, const TrainingSubset& subset,
                           const KMapConfig& cfg, SeededRng& rng) {
  if (cfg.input_dim != 1)
    throw std::invalid_argument("kmap train: sweep subsets carry scalar inputs only");
  std::vector<Vec> inputs;
  inputs.reserve(subset.entries.size());
  for (const auto& e : subset.entries) inputs.push_back({e.k});
  return train_kmap(m, inputs, continuous_targets(subset), cfg, rng);
}

Vec kmap_forward_raw(const KMapModel& m, const Vec& input) {
  return m.net.forward(m.in_stats.apply(input));
}

std::array<double, 4> kmap_forward(const KMapModel& m, double k) {
  if (m.cfg.input_dim != 1)
    throw std::invalid_argument("kmap forward: model expects a wider input");
  const Vec raw = kmap_forward_raw(m, {k});
  std::array<double, 4> a{};
  for (int j = 0; j < kNumAngles; ++j) a[j] = wrap_angle(raw[j]);
  return a;
}

Vec kmap_forward_cached(const KMapModel& m, const Vec& input, KMapCache& cache) {
  cache.layers.clear();
  return m.net.forward_cached(m.in_stats.apply(input), cache.layers);
}

Vec kmap_backward_input(const KMapModel& m, const KMapCache& cache, const Vec& dalpha) {
  Vec dx = m.net.backward(cache.layers, dalpha, nullptr);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] /= m.in_stats.stddev[i];
  return dx;
}

}  // namespace mlfl::kmap
