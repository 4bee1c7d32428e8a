// SPDX-License-Identifier: Apache-2.0
#include "mlfl/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mlfl/errors.hpp"

namespace mlfl::vae {

using nn::Dense;
using nn::DenseCache;
using nn::DenseGrad;

namespace {

void clamp_log_var(Vec& lv) {
  for (auto& x : lv) x = std::clamp(x, -kLogVarClamp, kLogVarClamp);
}

struct EncoderState {
  std::vector<DenseCache> trunk;
  DenseCache mu, lv;
  Vec h;            // trunk output
  Vec lv_raw;       // preactivation of the log-var head before clamping
};

Encoded encode_std(const VaeModel& m, const Vec& x_std, EncoderState* st) {
  Encoded out;
  for (double x : x_std)
    if (std::abs(x) > 10.0) out.outlier = true;
  if (st) {
    st->h = m.encoder_trunk.forward_cached(x_std, st->trunk);
    out.mu = dense_forward_cached(m.enc_mu, st->h, st->mu);
    out.log_var = dense_forward_cached(m.enc_log_var, st->h, st->lv);
    st->lv_raw = out.log_var;
  } else {
    Vec h = m.encoder_trunk.forward(x_std);
    out.mu = dense_forward(m.enc_mu, h);
    out.log_var = dense_forward(m.enc_log_var, h);
  }
  clamp_log_var(out.log_var);
  return out;
}

struct VaeGrads {
  std::vector<DenseGrad> trunk;
  DenseGrad mu, lv;
  std::vector<DenseGrad> dec;

  explicit VaeGrads(const VaeModel& m)
      : trunk(nn::make_grads(m.encoder_trunk)),
        mu(m.enc_mu),
        lv(m.enc_log_var),
        dec(nn::make_grads(m.decoder)) {}
  void zero() {
    for (auto& g : trunk) g.zero();
    mu.zero();
    lv.zero();
    for (auto& g : dec) g.zero();
  }
};

nn::ParamRefs param_refs(VaeModel& m) {
  nn::ParamRefs refs;
  auto add_mlp = [&](nn::Mlp& net) {
    for (auto& l : net.layers) {
      refs.emplace_back(l.W.d);
      refs.emplace_back(l.b);
    }
  };
  add_mlp(m.encoder_trunk);
  refs.emplace_back(m.enc_mu.W.d);
  refs.emplace_back(m.enc_mu.b);
  refs.emplace_back(m.enc_log_var.W.d);
  refs.emplace_back(m.enc_log_var.b);
  add_mlp(m.decoder);
  return refs;
}

std::vector<Vec> grad_vecs(const VaeGrads& g) {
  std::vector<Vec> out;
  for (const auto& t : g.trunk) {
    out.push_back(t.dW.d);
    out.push_back(t.db);
  }
  out.push_back(g.mu.dW.d);
  out.push_back(g.mu.db);
  out.push_back(g.lv.dW.d);
  out.push_back(g.lv.db);
  for (const auto& t : g.dec) {
    out.push_back(t.dW.d);
    out.push_back(t.db);
  }
  return out;
}

// Forward + backward for one standardized sample; returns the loss and
// accumulates parameter gradients.
double sample_loss_grad(VaeModel& m, const Vec& x_std, const Vec& eps, VaeGrads& grads) {
  EncoderState st;
  Encoded enc = encode_std(m, x_std, &st);
  const std::size_t L = enc.mu.size();
  Vec z(L), sig(L);
  for (std::size_t i = 0; i < L; ++i) {
    sig[i] = std::exp(0.5 * enc.log_var[i]);
    z[i] = enc.mu[i] + sig[i] * eps[i];
  }
  std::vector<DenseCache> dec_caches;
  Vec xhat = m.decoder.forward_cached(z, dec_caches);

  double rec = 0.0;
  Vec dxhat(xhat.size());
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    const double r = xhat[i] - x_std[i];
    rec += 0.5 * r * r;
    dxhat[i] = r;
  }
  const double kl = kl_gauss(enc.mu, enc.log_var);

  Vec dz = m.decoder.backward(dec_caches, dxhat, &grads.dec);
  Vec dmu(L), dlv(L);
  for (std::size_t i = 0; i < L; ++i) {
    dmu[i] = dz[i] + enc.mu[i];
    // clamp is a hard gate: no gradient outside its range
    const bool inside = std::abs(st.lv_raw[i]) < kLogVarClamp;
    dlv[i] = inside ? dz[i] * eps[i] * 0.5 * sig[i] + 0.5 * (std::exp(enc.log_var[i]) - 1.0)
                    : 0.0;
  }
  Vec dh_mu = dense_backward(m.enc_mu, st.mu, dmu, &grads.mu);
  Vec dh_lv = dense_backward(m.enc_log_var, st.lv, dlv, &grads.lv);
  for (std::size_t i = 0; i < dh_mu.size(); ++i) dh_mu[i] += dh_lv[i];
  (void)m.encoder_trunk.backward(st.trunk, dh_mu, &grads.trunk);
  return rec + kl;
}

double pearson(const Vec& a, const Vec& b) {
  const std::size_t n = a.size();
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;  // a collapsed dimension carries no signal
  return cov / std::sqrt(va * vb);
}

}  // namespace

Encoded encode(const VaeModel& m, const Vec& x_raw) {
  return encode_std(m, m.stats.apply(x_raw), nullptr);
}

Vec decode(const VaeModel& m, const Vec& z) { return m.decoder.forward(z); }

double kl_gauss(const Vec& mu, const Vec& log_var) {
  if (mu.size() != log_var.size()) throw std::invalid_argument("kl_gauss: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    kl += 0.5 * (mu[i] * mu[i] + std::exp(log_var[i]) - 1.0 - log_var[i]);
  return kl;
}

double vae_loss(const VaeModel& m, const Vec& x_std, const Vec& eps) {
  Encoded enc = encode_std(m, x_std, nullptr);
  Vec z(enc.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = enc.mu[i] + std::exp(0.5 * enc.log_var[i]) * eps[i];
  Vec xhat = m.decoder.forward(z);
  double rec = 0.0;
  for (std::size_t i = 0; i < xhat.size(); ++i)
    rec += 0.5 * (xhat[i] - x_std[i]) * (xhat[i] - x_std[i]);
  return rec + kl_gauss(enc.mu, enc.log_var);
}

TrainResult train_vae(const std::vector<Vec>& records_raw, const std::vector<double>& k_true,
                      const VaeConfig& cfg, SeededRng& rng) {
  if (records_raw.empty()) throw DataError("train_vae: empty dataset");
  if (records_raw.size() != k_true.size())
    throw DataError("train_vae: record/label count mismatch");
  for (const auto& r : records_raw)
    if (r.size() != kInputDim) throw DataError("train_vae: record dimension must be 6");
  if (cfg.hidden < 1 || cfg.epochs < 1 || cfg.batch < 1 || cfg.lr <= 0.0)
    throw std::invalid_argument("train_vae: bad config");
  if (cfg.holdout_fraction <= 0.0 || cfg.holdout_fraction >= 1.0)
    throw std::invalid_argument("train_vae: holdout_fraction must be in (0,1)");

  const std::size_t n = records_raw.size();
  const std::size_t n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * (1.0 - cfg.holdout_fraction)));
  if (n_train < 2 || n - n_train < 2)
    throw DataError("train_vae: dataset too small for the train/holdout split");

  // The unsupervised fit sees features only; labels are consumed solely by
  // the calibration pass below, on records the fit never saw.
  TrainResult out;
  VaeModel& m = out.model;
  std::vector<Vec> train_rows(records_raw.begin(), records_raw.begin() + n_train);
  m.stats = Standardizer::fit(train_rows);

  const std::size_t H = static_cast<std::size_t>(cfg.hidden);
  m.encoder_trunk = nn::make_mlp({kInputDim, H, H}, nn::Act::relu, nn::Act::relu, rng);
  m.enc_mu = Dense(H, kLatentDim, nn::Act::linear);
  m.enc_log_var = Dense(H, kLatentDim, nn::Act::linear);
  nn::xavier_init(m.enc_mu.W, rng);
  nn::xavier_init(m.enc_log_var.W, rng);
  m.decoder = nn::make_mlp({kLatentDim, H, H, kInputDim}, nn::Act::relu, nn::Act::linear, rng);

  std::vector<Vec> x_std(n_train);
  for (std::size_t i = 0; i < n_train; ++i) x_std[i] = m.stats.apply(train_rows[i]);

  nn::ParamRefs refs = param_refs(m);
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(refs, acfg);
  VaeGrads grads(m);

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  Vec eps(kLatentDim);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t pos = 0;
    while (pos < n_train) {
      const std::size_t bend = std::min(pos + static_cast<std::size_t>(cfg.batch), n_train);
      grads.zero();
      for (std::size_t i = pos; i < bend; ++i) {
        for (auto& e : eps) e = rng.normal();
        epoch_loss += sample_loss_grad(m, x_std[order[i]], eps, grads);
      }
      const double inv = 1.0 / static_cast<double>(bend - pos);
      std::vector<Vec> gv = grad_vecs(grads);
      for (auto& g : gv)
        for (auto& x : g) x *= inv;
      opt.step(refs, gv);
      pos = bend;
    }
    out.loss_by_epoch.push_back(epoch_loss / static_cast<double>(n_train));
  }

  // Calibration on the held-out tail.
  const std::size_t n_hold = n - n_train;
  std::vector<Vec> mu_by_dim(kLatentDim, Vec(n_hold));
  Vec k_hold(n_hold);
  for (std::size_t i = 0; i < n_hold; ++i) {
    Encoded e = encode(m, records_raw[n_train + i]);
    for (int d = 0; d < kLatentDim; ++d) mu_by_dim[d][i] = e.mu[d];
    k_hold[i] = k_true[n_train + i];
  }
  out.r_by_dim.resize(kLatentDim);
  int best = 0;
  for (int d = 0; d < kLatentDim; ++d) {
    out.r_by_dim[d] = pearson(mu_by_dim[d], k_hold);
    if (std::abs(out.r_by_dim[d]) > std::abs(out.r_by_dim[best])) best = d;
  }
  out.best_abs_r = std::abs(out.r_by_dim[best]);
  if (out.best_abs_r >= cfg.r_threshold) {
    LatentCalibration cal;
    cal.dim_index = best;
    cal.pearson_r = out.r_by_dim[best];
    const Vec& mu = mu_by_dim[best];
    const double mmu = std::accumulate(mu.begin(), mu.end(), 0.0) / n_hold;
    const double mk = std::accumulate(k_hold.begin(), k_hold.end(), 0.0) / n_hold;
    double cov = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n_hold; ++i) {
      cov += (mu[i] - mmu) * (k_hold[i] - mk);
      var += (mu[i] - mmu) * (mu[i] - mmu);
    }
    cal.scale = cov / var;  // var > 0 is implied by a nonzero pearson r
    cal.offset = mk - cal.scale * mmu;
    out.calibration = cal;
  }
  return out;
}

double infer_k(const VaeModel& m, const LatentCalibration& c, const Vec& x_raw) {
  Encoded e = encode(m, x_raw);
  return c.scale * e.mu[static_cast<std::size_t>(c.dim_index)] + c.offset;
}

nn::ParamRefs vae_param_refs(VaeModel& m) { return param_refs(m); }

double vae_loss_with_grads(VaeModel& m, const Vec& x_std, const Vec& eps,
                           std::vector<Vec>& grads_out) {
  VaeGrads grads(m);
  const double loss = sample_loss_grad(m, x_std, eps, grads);
  grads_out = grad_vecs(grads);
  return loss;
}

}  // namespace mlfl::vae
