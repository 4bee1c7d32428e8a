// SPDX-License-Identifier: Apache-2.0
#include "mlfl/mprnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "mlfl/errors.hpp"

namespace mlfl::mprnn {

using nn::mat_mul_acc;
using nn::mat_t_mul;
using nn::outer_acc;

namespace {

Vec relu_of(const Vec& pre) {
  Vec y(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) y[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  return y;
}

// Subgradient 0 where the preactivation was not strictly positive.
Vec mask_mul(const Vec& d, const Vec& pre) {
  Vec y(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) y[i] = pre[i] > 0.0 ? d[i] : 0.0;
  return y;
}

Vec hadamard(const Vec& a, const Vec& b) {
  Vec y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

Vec hadamard3(const Vec& a, const Vec& b, const Vec& c) {
  Vec y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i] * c[i];
  return y;
}

void add_into(Vec& dst, const Vec& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Records [from, to) flattened row-major.
Vec flatten_x(std::span<const Vec> rec, std::size_t from, std::size_t to) {
  Vec out;
  out.reserve((to - from) * rec[from].size());
  for (std::size_t t = from; t < to; ++t) out.insert(out.end(), rec[t].begin(), rec[t].end());
  return out;
}

// Control columns (the last N_u of each record) of [from, to), flattened.
Vec flatten_u(std::span<const Vec> rec, std::size_t from, std::size_t to, int n_v, int n_u) {
  Vec out;
  out.reserve((to - from) * static_cast<std::size_t>(n_u));
  for (std::size_t t = from; t < to; ++t)
    out.insert(out.end(), rec[t].begin() + n_v, rec[t].begin() + n_v + n_u);
  return out;
}

}  // namespace

void MpRnnConfig::validate() const {
  if (N < 1 || b < 1 || N_x < 1 || N_u < 1 || N_h < 1 || N_l < 1 || N_K < 1 || N_v < 1)
    throw ConfigError("mprnn: every dimension must be at least 1");
  // The record stream carries (v, u) per step, so windows can slice both.
  if (N_x != N_v + N_u) throw ConfigError("mprnn: N_x must equal N_v + N_u");
}

MpRnnCellWeights make_weights(const MpRnnConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const auto xb = static_cast<std::size_t>(cfg.N_x) * static_cast<std::size_t>(cfg.b);
  const auto ub = static_cast<std::size_t>(cfg.N_u) * static_cast<std::size_t>(cfg.b);
  const auto H = static_cast<std::size_t>(cfg.N_h);
  const auto L = static_cast<std::size_t>(cfg.N_l);
  const auto K = static_cast<std::size_t>(cfg.N_K);
  const auto V = static_cast<std::size_t>(cfg.N_v);

  MpRnnCellWeights w;
  w.W_l_past = nn::Mat(xb, H);
  w.W_l_current = nn::Mat(xb, H);
  w.W_hl = nn::Mat(H, L);
  w.W_ll = nn::Mat(L, L);
  w.W_current = nn::Mat(xb, H);
  w.W_future = nn::Mat(ub, H);
  w.W_l = nn::Mat(L, H);
  w.W_Ko = nn::Mat(H, K);
  w.W_o = nn::Mat(H, V);
  for (auto* m : {&w.W_l_past, &w.W_l_current, &w.W_hl, &w.W_ll, &w.W_current, &w.W_future,
                  &w.W_l, &w.W_Ko, &w.W_o})
    nn::xavier_init(*m, rng);
  w.b_l_past.assign(H, 0.0);
  w.b_l_current.assign(H, 0.0);
  w.b_hl.assign(L, 0.0);
  w.b_current.assign(H, 0.0);
  w.b_future.assign(H, 0.0);
  w.b_latent.assign(H, 0.0);
  w.b_Ko.assign(K, 0.0);
  w.b_o.assign(V, 0.0);
  return w;
}

nn::ParamRefs param_refs(MpRnnCellWeights& w) {
  return {w.W_l_past.d, w.b_l_past, w.W_l_current.d, w.b_l_current, w.W_hl.d,
          w.W_ll.d,     w.b_hl,     w.W_current.d,   w.b_current,   w.W_future.d,
          w.b_future,   w.W_l.d,    w.b_latent,      w.W_Ko.d,      w.b_Ko,
          w.W_o.d,      w.b_o};
}

void zero_weights(MpRnnCellWeights& w) {
  auto refs = param_refs(w);
  for (auto s : refs) std::fill(s.begin(), s.end(), 0.0);
}

std::vector<Vec> flat_grads(const MpRnnCellWeights& g) {
  auto refs = param_refs(const_cast<MpRnnCellWeights&>(g));
  std::vector<Vec> out;
  out.reserve(refs.size());
  for (auto s : refs) out.emplace_back(s.begin(), s.end());
  return out;
}

PreparedRuns prepare_runs(const std::vector<Sequence>& runs) {
  std::vector<Vec> rows;
  Vec ks;
  for (const auto& run : runs)
    for (const auto& r : run) {
      rows.push_back({r.e, r.m, r.alpha[0], r.alpha[1], r.alpha[2], r.alpha[3]});
      ks.push_back(r.k);
    }
  if (rows.empty()) throw DataError("mprnn: empty dataset");
  const auto stats = nn::Standardizer::fit(rows);
  double mean = std::accumulate(ks.begin(), ks.end(), 0.0) / static_cast<double>(ks.size());
  double var = 0.0;
  for (double k : ks) var += (k - mean) * (k - mean);
  const double k_sigma =
      std::max(std::sqrt(var / static_cast<double>(ks.size())), 1e-12);
  return prepare_runs(runs, stats, k_sigma);
}

PreparedRuns prepare_runs(const std::vector<Sequence>& runs, const nn::Standardizer& stats,
                          double k_sigma) {
  PreparedRuns out;
  out.stats = stats;
  out.k_sigma = k_sigma;
  for (const auto& run : runs) {
    std::vector<Vec> x;
    Vec k;
    for (const auto& r : run) {
      x.push_back(stats.apply({r.e, r.m, r.alpha[0], r.alpha[1], r.alpha[2], r.alpha[3]}));
      k.push_back(r.k);
    }
    out.x.push_back(std::move(x));
    out.k.push_back(std::move(k));
  }
  if (out.x.empty()) throw DataError("mprnn: empty dataset");
  return out;
}

CellOut cell_forward(const MpRnnCellWeights& w, const MpRnnConfig& cfg, const Vec& x_past,
                     const Vec& x_cur, Vec u_fut, const Vec& l_past,
                     const kmap::KMapModel* km, const nn::Standardizer* stats,
                     bool encoder, CellTape* tape) {
  const auto xb = static_cast<std::size_t>(cfg.N_x) * static_cast<std::size_t>(cfg.b);
  const auto ub = static_cast<std::size_t>(cfg.N_u) * static_cast<std::size_t>(cfg.b);
  if (x_past.size() != xb || x_cur.size() != xb)
    throw std::invalid_argument("mprnn cell: record window width mismatch");
  if (l_past.size() != static_cast<std::size_t>(cfg.N_l))
    throw std::invalid_argument("mprnn cell: latent width mismatch");
  if (!encoder && u_fut.size() != ub)
    throw std::invalid_argument("mprnn cell: control window width mismatch");

  Vec pre_lp = w.b_l_past;
  mat_mul_acc(w.W_l_past, x_past, pre_lp);
  Vec h_lp = relu_of(pre_lp);
  Vec pre_lc = w.b_l_current;
  mat_mul_acc(w.W_l_current, x_cur, pre_lc);
  Vec h_lc = relu_of(pre_lc);
  Vec m_l = hadamard(h_lp, h_lc);
  Vec pre_l = w.b_hl;
  mat_mul_acc(w.W_hl, m_l, pre_l);
  mat_mul_acc(w.W_ll, l_past, pre_l);
  Vec l_cur = relu_of(pre_l);

  CellOut out;
  out.l_cur = l_cur;
  if (tape) {
    tape->encoder = encoder;
    tape->x_past = x_past;
    tape->x_cur = x_cur;
    tape->l_past = l_past;
    tape->pre_lp = pre_lp;
    tape->h_lp = h_lp;
    tape->pre_lc = pre_lc;
    tape->h_lc = h_lc;
    tape->pre_l = pre_l;
    tape->l_cur = l_cur;
    tape->m_l = m_l;
  }
  if (encoder) return out;

  Vec pre_lat = w.b_latent;
  mat_mul_acc(w.W_l, l_cur, pre_lat);
  Vec h_lat = relu_of(pre_lat);
  Vec k_hat = w.b_Ko;
  mat_mul_acc(w.W_Ko, h_lat, k_hat);

  bool proposal = false;
  std::array<double, 4> alpha_raw{};
  kmap::KMapCache km_cache;
  Vec alpha_scale;
  if (km != nullptr) {
    if (cfg.N_K != 1 || km->cfg.input_dim != 1)
      throw ConfigError("mprnn cell: angle proposals need a scalar birefringence map");
    if (stats == nullptr)
      throw std::invalid_argument("mprnn cell: proposal mode needs stream statistics");
    proposal = true;
    const Vec raw = kmap::kmap_forward_cached(*km, {k_hat[0]}, km_cache);
    alpha_scale.resize(static_cast<std::size_t>(cfg.N_u));
    for (int i = 0; i < cfg.N_u; ++i) {
      alpha_raw[static_cast<std::size_t>(i)] = kmap::wrap_angle(raw[static_cast<std::size_t>(i)]);
      const auto col = static_cast<std::size_t>(cfg.N_v + i);
      const double sd = stats->stddev[col];
      u_fut[ub - static_cast<std::size_t>(cfg.N_u - i)] =
          (alpha_raw[static_cast<std::size_t>(i)] - stats->mean[col]) / sd;
      alpha_scale[static_cast<std::size_t>(i)] = 1.0 / sd;
    }
  }
  out.alpha_std.assign(u_fut.end() - cfg.N_u, u_fut.end());
  out.alpha_raw = alpha_raw;

  Vec pre_cur = w.b_current;
  mat_mul_acc(w.W_current, x_cur, pre_cur);
  Vec h_cur = relu_of(pre_cur);
  Vec pre_fut = w.b_future;
  mat_mul_acc(w.W_future, u_fut, pre_fut);
  Vec h_fut = relu_of(pre_fut);
  Vec m_o = hadamard3(h_lat, h_cur, h_fut);
  Vec v_hat = w.b_o;
  mat_mul_acc(w.W_o, m_o, v_hat);

  out.k_hat = k_hat;
  out.v_hat = v_hat;
  if (tape) {
    tape->proposal = proposal;
    tape->u_fut = std::move(u_fut);
    tape->pre_lat = std::move(pre_lat);
    tape->h_lat = std::move(h_lat);
    tape->pre_cur = std::move(pre_cur);
    tape->h_cur = std::move(h_cur);
    tape->pre_fut = std::move(pre_fut);
    tape->h_fut = std::move(h_fut);
    tape->m_o = std::move(m_o);
    tape->k_hat = out.k_hat;
    tape->km_cache = std::move(km_cache);
    tape->alpha_raw = alpha_raw;
    tape->alpha_std = out.alpha_std;
    tape->v_hat = out.v_hat;
    if (proposal) tape->alpha_scale = std::move(alpha_scale);
  }
  return out;
}

CellBackOut cell_backward(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                          const CellTape& tape, const CellBackIn& in,
                          const kmap::KMapModel* km, MpRnnCellWeights& g) {
  const auto L = static_cast<std::size_t>(cfg.N_l);
  CellBackOut out;

  Vec dl_cur(L, 0.0);
  if (!in.dl.empty()) add_into(dl_cur, in.dl);

  if (!tape.encoder) {
    Vec dv(static_cast<std::size_t>(cfg.N_v), 0.0);
    if (!in.dv.empty()) add_into(dv, in.dv);

    // Output readout and the three-way product.
    add_into(g.b_o, dv);
    outer_acc(g.W_o, tape.m_o, dv);
    Vec dm_o = mat_t_mul(w.W_o, dv);
    Vec dh_lat = hadamard3(dm_o, tape.h_cur, tape.h_fut);
    Vec dh_cur = hadamard3(dm_o, tape.h_lat, tape.h_fut);
    Vec dh_fut = hadamard3(dm_o, tape.h_lat, tape.h_cur);

    // Control pathway.
    Vec dpre_fut = mask_mul(dh_fut, tape.pre_fut);
    add_into(g.b_future, dpre_fut);
    outer_acc(g.W_future, tape.u_fut, dpre_fut);
    out.du_fut = mat_t_mul(w.W_future, dpre_fut);

    // Birefringence readout; in proposal mode the appended control feeds the
    // gradient back through the frozen map into K.
    Vec dk(static_cast<std::size_t>(cfg.N_K), 0.0);
    if (!in.dk.empty()) add_into(dk, in.dk);
    if (tape.proposal) {
      const auto nu = static_cast<std::size_t>(cfg.N_u);
      Vec dalpha_raw(nu, 0.0);
      for (std::size_t i = 0; i < nu; ++i) {
        double d = out.du_fut[out.du_fut.size() - nu + i];
        if (!in.dalpha_std.empty()) d += in.dalpha_std[i];
        dalpha_raw[i] = d * tape.alpha_scale[i];
        out.du_fut[out.du_fut.size() - nu + i] = 0.0;  // consumed by the map
      }
      const Vec dk_map = kmap::kmap_backward_input(*km, tape.km_cache, dalpha_raw);
      dk[0] += dk_map[0];
    }
    add_into(g.b_Ko, dk);
    outer_acc(g.W_Ko, tape.h_lat, dk);
    add_into(dh_lat, mat_t_mul(w.W_Ko, dk));

    // Latent head.
    Vec dpre_lat = mask_mul(dh_lat, tape.pre_lat);
    add_into(g.b_latent, dpre_lat);
    outer_acc(g.W_l, tape.l_cur, dpre_lat);
    add_into(dl_cur, mat_t_mul(w.W_l, dpre_lat));

    // Current pathway.
    Vec dpre_cur = mask_mul(dh_cur, tape.pre_cur);
    add_into(g.b_current, dpre_cur);
    outer_acc(g.W_current, tape.x_cur, dpre_cur);
    out.dx_cur = mat_t_mul(w.W_current, dpre_cur);
  }

  // Long-term pathway shared by encoder and decoder cells.
  Vec dpre_l = mask_mul(dl_cur, tape.pre_l);
  add_into(g.b_hl, dpre_l);
  outer_acc(g.W_hl, tape.m_l, dpre_l);
  outer_acc(g.W_ll, tape.l_past, dpre_l);
  out.dl_past = mat_t_mul(w.W_ll, dpre_l);
  Vec dm_l = mat_t_mul(w.W_hl, dpre_l);
  Vec dh_lp = hadamard(dm_l, tape.h_lc);
  Vec dh_lc = hadamard(dm_l, tape.h_lp);
  Vec dpre_lp = mask_mul(dh_lp, tape.pre_lp);
  add_into(g.b_l_past, dpre_lp);
  outer_acc(g.W_l_past, tape.x_past, dpre_lp);
  out.dx_past = mat_t_mul(w.W_l_past, dpre_lp);
  Vec dpre_lc = mask_mul(dh_lc, tape.pre_lc);
  add_into(g.b_l_current, dpre_lc);
  outer_acc(g.W_l_current, tape.x_cur, dpre_lc);
  if (out.dx_cur.empty())
    out.dx_cur = mat_t_mul(w.W_l_current, dpre_lc);
  else
    add_into(out.dx_cur, mat_t_mul(w.W_l_current, dpre_lc));
  return out;
}

RolloutResult rollout(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                      std::span<const Vec> stream, const kmap::KMapModel* km,
                      const nn::Standardizer* stats,
                      const std::vector<Vec>* controls_std, RolloutTape* tape) {
  const auto N = static_cast<std::size_t>(cfg.N);
  const auto b = static_cast<std::size_t>(cfg.b);
  const std::size_t W = N + 2 * b;
  if (stream.size() < W) throw DataError("mprnn rollout: insufficient history");
  if (controls_std == nullptr && km == nullptr)
    throw std::invalid_argument("mprnn rollout: need either controls or a proposal map");
  if (controls_std != nullptr && controls_std->size() != N)
    throw std::invalid_argument("mprnn rollout: controls must cover the horizon");

  std::vector<Vec> rec(stream.end() - static_cast<std::ptrdiff_t>(W), stream.end());
  rec.resize(W + N);
  if (tape) {
    tape->cells.assign(2 * N, CellTape{});
    tape->n_real = W;
  }

  RolloutResult res;
  res.k_hat.reserve(N * static_cast<std::size_t>(cfg.N_K));
  Vec l(static_cast<std::size_t>(cfg.N_l), 0.0);
  for (std::size_t j = 0; j < N; ++j) {
    const Vec x_past = flatten_x(rec, j, j + b);
    const Vec x_cur = flatten_x(rec, j + b, j + 2 * b);
    auto out = cell_forward(w, cfg, x_past, x_cur, {}, l, nullptr, nullptr, true,
                            tape ? &tape->cells[j] : nullptr);
    l = std::move(out.l_cur);
  }
  for (std::size_t k = 0; k < N; ++k) {
    const Vec x_past = flatten_x(rec, W - 2 * b + k, W - b + k);
    const Vec x_cur = flatten_x(rec, W - b + k, W + k);
    Vec u_fut = flatten_u(rec, W - b + k + 1, W + k, cfg.N_v, cfg.N_u);
    u_fut.resize(static_cast<std::size_t>(cfg.N_u) * b, 0.0);
    if (controls_std != nullptr) {
      const Vec& c = (*controls_std)[k];
      if (c.size() != static_cast<std::size_t>(cfg.N_u))
        throw std::invalid_argument("mprnn rollout: control width mismatch");
      std::copy(c.begin(), c.end(), u_fut.end() - cfg.N_u);
    }
    auto out = cell_forward(w, cfg, x_past, x_cur, std::move(u_fut), l,
                            controls_std == nullptr ? km : nullptr, stats, false,
                            tape ? &tape->cells[N + k] : nullptr);
    Vec& next = rec[W + k];
    next.resize(static_cast<std::size_t>(cfg.N_x));
    std::copy(out.v_hat.begin(), out.v_hat.end(), next.begin());
    std::copy(out.alpha_std.begin(), out.alpha_std.end(), next.begin() + cfg.N_v);
    l = std::move(out.l_cur);
    res.k_hat.insert(res.k_hat.end(), out.k_hat.begin(), out.k_hat.end());
    res.v_hat.push_back(std::move(out.v_hat));
    if (controls_std == nullptr) res.alpha_raw.push_back(out.alpha_raw);
  }
  return res;
}

void rollout_backward(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                      const RolloutTape& tape, const std::vector<Vec>& dv, const Vec& dk,
                      const kmap::KMapModel* km, MpRnnCellWeights& grads,
                      std::vector<Vec>* dcontrols_out) {
  const auto N = static_cast<std::size_t>(cfg.N);
  const auto b = static_cast<std::size_t>(cfg.b);
  const std::size_t W = tape.n_real;
  const auto nv = static_cast<std::size_t>(cfg.N_v);
  const auto nu = static_cast<std::size_t>(cfg.N_u);
  const auto nk = static_cast<std::size_t>(cfg.N_K);
  if (dv.size() != N || dk.size() != N * nk)
    throw std::invalid_argument("mprnn rollout backward: gradient size mismatch");

  // Accumulators for gradients flowing into stream records; entries below W
  // are real data and are discarded at the end.
  std::vector<Vec> dRec(W + N, Vec(static_cast<std::size_t>(cfg.N_x), 0.0));
  auto route_x = [&](std::size_t from, const Vec& dx) {
    const auto nx = static_cast<std::size_t>(cfg.N_x);
    for (std::size_t t = 0; t < dx.size() / nx; ++t)
      for (std::size_t i = 0; i < nx; ++i) dRec[from + t][i] += dx[t * nx + i];
  };
  auto route_u = [&](std::size_t from, const Vec& du, std::size_t count) {
    for (std::size_t t = 0; t < count; ++t)
      for (std::size_t i = 0; i < nu; ++i) dRec[from + t][nv + i] += du[t * nu + i];
  };

  Vec dl_next;
  for (std::size_t k = N; k-- > 0;) {
    const CellTape& ct = tape.cells[N + k];
    CellBackIn in;
    in.dv = dv[k];
    in.dv.resize(nv);
    for (std::size_t i = 0; i < nv; ++i) in.dv[i] += dRec[W + k][i];
    in.dk.assign(dk.begin() + static_cast<std::ptrdiff_t>(k * nk),
                 dk.begin() + static_cast<std::ptrdiff_t>((k + 1) * nk));
    in.dl = dl_next;
    if (ct.proposal)
      in.dalpha_std.assign(dRec[W + k].begin() + static_cast<std::ptrdiff_t>(nv),
                           dRec[W + k].begin() + static_cast<std::ptrdiff_t>(nv + nu));
    auto outb = cell_backward(w, cfg, ct, in, km, grads);
    dl_next = std::move(outb.dl_past);
    route_x(W - 2 * b + k, outb.dx_past);
    route_x(W - b + k, outb.dx_cur);
    route_u(W - b + k + 1, outb.du_fut, b - 1);
    if (!ct.proposal)  // override: the final slot is the planned control
      for (std::size_t i = 0; i < nu; ++i)
        dRec[W + k][nv + i] += outb.du_fut[(b - 1) * nu + i];
  }
  for (std::size_t j = N; j-- > 0;) {
    CellBackIn in;
    in.dl = dl_next;
    auto outb = cell_backward(w, cfg, tape.cells[j], in, nullptr, grads);
    dl_next = std::move(outb.dl_past);
    // Encoder windows cover real records only; nothing to route.
  }

  if (dcontrols_out != nullptr) {
    dcontrols_out->assign(N, Vec(nu, 0.0));
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t i = 0; i < nu; ++i) (*dcontrols_out)[k][i] = dRec[W + k][nv + i];
  }
}

HistoryBuffer::HistoryBuffer(std::size_t capacity, nn::Standardizer stats)
    : cap_(capacity), ring_(capacity), stats_(std::move(stats)) {
  if (capacity == 0) throw std::invalid_argument("history: zero capacity");
}

void HistoryBuffer::push(const StepRecord& r) {
  ring_[count_ % cap_] = r;
  ++count_;
}

std::vector<Vec> HistoryBuffer::last_std(std::size_t n) const {
  if (n > size()) throw DataError("history: fewer records than requested");
  std::vector<Vec> out;
  out.reserve(n);
  for (std::size_t i = count_ - n; i < count_; ++i) {
    const StepRecord& r = ring_[i % cap_];
    out.push_back(stats_.apply({r.e, r.m, r.alpha[0], r.alpha[1], r.alpha[2], r.alpha[3]}));
  }
  return out;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One conditional RBM: Gaussian visibles with unit variance, logistic
// hiddens, conditioning window shifted into the visible bias.
struct Crbm {
  nn::Mat W;   // n_vis x n_hid
  nn::Mat A;   // n_cond x n_vis
  Vec b_v, b_h;

  Crbm(std::size_t n_vis, std::size_t n_cond, std::size_t n_hid, SeededRng& rng)
      : W(n_vis, n_hid), A(n_cond, n_vis), b_v(n_vis, 0.0), b_h(n_hid, 0.0) {
    for (auto& x : W.d) x = 0.01 * rng.normal();
  }

  Vec hidden_prob(const Vec& v) const {
    Vec p = b_h;
    mat_mul_acc(W, v, p);
    for (auto& x : p) x = sigmoid(x);
    return p;
  }
  Vec reconstruct(const Vec& v, const Vec& cond) const {
    Vec p = hidden_prob(v);
    Vec r = b_v;
    mat_mul_acc(A, cond, r);
    add_into(r, mat_t_mul(W, p));
    return r;
  }
  void cd1(const Vec& v, const Vec& cond, double lr) {
    Vec p0 = hidden_prob(v);
    Vec v1 = reconstruct(v, cond);
    Vec p1 = hidden_prob(v1);
    Vec lp0 = p0, lp1 = p1;
    for (auto& x : lp0) x *= lr;
    for (auto& x : lp1) x *= -lr;
    outer_acc(W, v, lp0);
    outer_acc(W, v1, lp1);
    Vec dv(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) dv[i] = lr * (v[i] - v1[i]);
    outer_acc(A, cond, dv);
    add_into(b_v, dv);
    for (std::size_t i = 0; i < b_h.size(); ++i) b_h[i] += lr * (p0[i] - p1[i]);
  }
  double recon_err(const Vec& v, const Vec& cond) const {
    const Vec r = reconstruct(v, cond);
    double e = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) e += (v[i] - r[i]) * (v[i] - r[i]);
    return e / static_cast<double>(v.size());
  }
};

// Anchor times with full context for all four pathway windows.
std::vector<std::pair<std::size_t, std::size_t>> crbm_anchors(const PreparedRuns& data,
                                                              const MpRnnConfig& cfg) {
  std::vector<std::pair<std::size_t, std::size_t>> anchors;
  const auto b = static_cast<std::size_t>(cfg.b);
  for (std::size_t r = 0; r < data.x.size(); ++r) {
    const std::size_t len = data.x[r].size();
    if (len < 3 * b + 1) continue;
    for (std::size_t t = 3 * b - 1; t + 1 < len; ++t) anchors.emplace_back(r, t);
  }
  return anchors;
}

}  // namespace

CrbmReport crbm_pretrain(MpRnnCellWeights& w, const PreparedRuns& data,
                         const MpRnnConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const auto b = static_cast<std::size_t>(cfg.b);
  auto anchors = crbm_anchors(data, cfg);
  if (anchors.empty()) throw DataError("mprnn crbm: no windows with full context");

  const auto xb = static_cast<std::size_t>(cfg.N_x) * b;
  const auto ub = static_cast<std::size_t>(cfg.N_u) * b;
  const auto H = static_cast<std::size_t>(cfg.N_h);
  std::vector<Crbm> rbm;
  rbm.reserve(4);
  rbm.emplace_back(xb, xb, H, rng);  // l_past pathway
  rbm.emplace_back(xb, xb, H, rng);  // l_current pathway
  rbm.emplace_back(xb, xb, H, rng);  // current pathway
  rbm.emplace_back(ub, ub, H, rng);  // future pathway

  // Visible/conditioning windows per pathway for anchor (r, t).
  auto windows = [&](int p, std::size_t r, std::size_t t) -> std::pair<Vec, Vec> {
    const auto& x = data.x[r];
    switch (p) {
      case 0:
        return {flatten_x(x, t - 2 * b + 1, t - b + 1), flatten_x(x, t - 3 * b + 1, t - 2 * b + 1)};
      case 1:
      case 2:
        return {flatten_x(x, t - b + 1, t + 1), flatten_x(x, t - 2 * b + 1, t - b + 1)};
      default:
        return {flatten_u(x, t - b + 2, t + 2, cfg.N_v, cfg.N_u),
                flatten_u(x, t - 2 * b + 2, t - b + 2, cfg.N_v, cfg.N_u)};
    }
  };
  auto mean_recon = [&](int p) {
    double e = 0.0;
    for (const auto& [r, t] : anchors) {
      const auto [v, c] = windows(p, r, t);
      e += rbm[static_cast<std::size_t>(p)].recon_err(v, c);
    }
    return e / static_cast<double>(anchors.size());
  };

  CrbmReport rep;
  for (int p = 0; p < 4; ++p) rep.recon_before[static_cast<std::size_t>(p)] = mean_recon(p);
  if (cfg.crbm_epochs <= 0) {
    rep.recon_after = rep.recon_before;
    return rep;  // cell weights untouched
  }
  for (int epoch = 0; epoch < cfg.crbm_epochs; ++epoch) {
    shuffle(anchors, rng);
    for (const auto& [r, t] : anchors)
      for (int p = 0; p < 4; ++p) {
        const auto [v, c] = windows(p, r, t);
        rbm[static_cast<std::size_t>(p)].cd1(v, c, cfg.crbm_lr);
      }
  }
  for (int p = 0; p < 4; ++p) rep.recon_after[static_cast<std::size_t>(p)] = mean_recon(p);

  w.W_l_past = rbm[0].W;
  w.b_l_past = rbm[0].b_h;
  w.W_l_current = rbm[1].W;
  w.b_l_current = rbm[1].b_h;
  w.W_current = rbm[2].W;
  w.b_current = rbm[2].b_h;
  w.W_future = rbm[3].W;
  w.b_future = rbm[3].b_h;
  return rep;
}

namespace {

struct SsWindow {
  std::size_t run, t;  // cell time; window records are [t-2b+1, t+1]
};

std::vector<SsWindow> ss_windows(const PreparedRuns& data, const MpRnnConfig& cfg) {
  std::vector<SsWindow> ws;
  const auto b = static_cast<std::size_t>(cfg.b);
  for (std::size_t r = 0; r < data.x.size(); ++r) {
    const std::size_t len = data.x[r].size();
    if (len < 2 * b + 1) continue;
    for (std::size_t t = 2 * b - 1; t + 1 < len; ++t) ws.push_back({r, t});
  }
  return ws;
}

struct RhWindow {
  std::size_t run, start;  // stream records are [start, start + N + 2b)
};

std::vector<RhWindow> rh_windows(const PreparedRuns& data, const MpRnnConfig& cfg) {
  std::vector<RhWindow> ws;
  const auto need = static_cast<std::size_t>(cfg.N) * 2 + 2 * static_cast<std::size_t>(cfg.b);
  const auto stride = static_cast<std::size_t>(std::max(cfg.rh_stride, 1));
  for (std::size_t r = 0; r < data.x.size(); ++r) {
    const std::size_t len = data.x[r].size();
    if (len < need) continue;
    for (std::size_t s = 0; s + need <= len; s += stride) ws.push_back({r, s});
  }
  return ws;
}

}  // namespace

TrainReport train_single_step(MpRnnCellWeights& w, const PreparedRuns& data,
                              const MpRnnConfig& cfg, SeededRng& rng) {
  cfg.validate();
  if (cfg.N_K != 1) throw ConfigError("mprnn: supervision expects one birefringence latent");
  auto ws = ss_windows(data, cfg);
  if (ws.empty()) throw DataError("mprnn: no single-step windows");
  const auto b = static_cast<std::size_t>(cfg.b);
  const auto nv = static_cast<std::size_t>(cfg.N_v);

  auto params = param_refs(w);
  nn::Adam opt(params, {.lr = cfg.ss_lr});
  MpRnnCellWeights grads = w;
  const Vec l0(static_cast<std::size_t>(cfg.N_l), 0.0);
  const int batch = std::max(cfg.ss_batch, 1);

  TrainReport rep;
  MpRnnCellWeights good = w;
  for (int epoch = 0; epoch < cfg.ss_epochs; ++epoch) {
    shuffle(ws, rng);
    double epoch_loss = 0.0;
    for (std::size_t base = 0; base < ws.size(); base += static_cast<std::size_t>(batch)) {
      const std::size_t n = std::min(ws.size() - base, static_cast<std::size_t>(batch));
      zero_weights(grads);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto [r, t] = ws[base + i];
        const auto& x = data.x[r];
        const std::size_t s = t - (2 * b - 1);
        CellTape tape;
        auto out = cell_forward(w, cfg, flatten_x(x, s, s + b), flatten_x(x, s + b, s + 2 * b),
                                flatten_u(x, s + b + 1, s + 2 * b + 1, cfg.N_v, cfg.N_u), l0,
                                nullptr, nullptr, false, &tape);
        CellBackIn in;
        in.dv.resize(nv);
        in.dk.resize(static_cast<std::size_t>(cfg.N_K));
        for (std::size_t q = 0; q < nv; ++q) {
          const double res = out.v_hat[q] - x[t + 1][q];
          epoch_loss += 0.5 * res * res;
          in.dv[q] = res * inv_n;
        }
        const double kres = (out.k_hat[0] - data.k[r][t + 1]) / data.k_sigma;
        epoch_loss += 0.5 * cfg.lambda_k * kres * kres;
        in.dk[0] = cfg.lambda_k * kres / data.k_sigma * inv_n;
        cell_backward(w, cfg, tape, in, nullptr, grads);
      }
      auto flat = flat_grads(grads);
      try {
        opt.step(params, flat);
      } catch (const NonfiniteGradient&) {
        w = good;
        rep.diverged = true;
        return rep;
      }
    }
    epoch_loss /= static_cast<double>(ws.size());
    if (!std::isfinite(epoch_loss)) {
      w = good;
      rep.diverged = true;
      return rep;
    }
    rep.loss_by_epoch.push_back(epoch_loss);
    good = w;
  }
  return rep;
}

TrainReport train_receding_horizon(MpRnnCellWeights& w, const PreparedRuns& data,
                                   const MpRnnConfig& cfg, SeededRng& rng) {
  cfg.validate();
  if (cfg.N_K != 1) throw ConfigError("mprnn: supervision expects one birefringence latent");
  auto ws = rh_windows(data, cfg);
  if (ws.empty()) throw DataError("mprnn: no horizon windows");
  const auto N = static_cast<std::size_t>(cfg.N);
  const auto b = static_cast<std::size_t>(cfg.b);
  const std::size_t W = N + 2 * b;
  const auto nv = static_cast<std::size_t>(cfg.N_v);

  auto params = param_refs(w);
  nn::Adam opt(params, {.lr = cfg.rh_lr});
  MpRnnCellWeights grads = w;
  const int batch = std::max(cfg.rh_batch, 1);

  TrainReport rep;
  MpRnnCellWeights good = w;
  for (int epoch = 0; epoch < cfg.rh_epochs; ++epoch) {
    shuffle(ws, rng);
    double epoch_loss = 0.0;
    for (std::size_t base = 0; base < ws.size(); base += static_cast<std::size_t>(batch)) {
      const std::size_t n = std::min(ws.size() - base, static_cast<std::size_t>(batch));
      zero_weights(grads);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto [r, s] = ws[base + i];
        const auto& x = data.x[r];
        std::vector<Vec> controls(N);
        for (std::size_t k = 0; k < N; ++k)
          controls[k] = Vec(x[s + W + k].begin() + cfg.N_v, x[s + W + k].end());
        RolloutTape tape;
        auto res = rollout(w, cfg, std::span<const Vec>(x).subspan(s, W), nullptr, nullptr,
                           &controls, &tape);
        std::vector<Vec> dv(N, Vec(nv, 0.0));
        Vec dk(N, 0.0);
        for (std::size_t k = 0; k < N; ++k) {
          for (std::size_t q = 0; q < nv; ++q) {
            const double res_q = res.v_hat[k][q] - x[s + W + k][q];
            epoch_loss += 0.5 * res_q * res_q;
            dv[k][q] = res_q * inv_n;
          }
          const double kres = (res.k_hat[k] - data.k[r][s + W + k]) / data.k_sigma;
          epoch_loss += 0.5 * cfg.lambda_k * kres * kres;
          dk[k] = cfg.lambda_k * kres / data.k_sigma * inv_n;
        }
        rollout_backward(w, cfg, tape, dv, dk, nullptr, grads, nullptr);
      }
      auto flat = flat_grads(grads);
      if (cfg.clip > 0.0) {
        const double norm = nn::clip_global_norm(flat, cfg.clip);
        rep.max_grad_norm = std::max(rep.max_grad_norm, norm);
      }
      try {
        opt.step(params, flat);
      } catch (const NonfiniteGradient&) {
        w = good;
        rep.diverged = true;
        return rep;
      }
    }
    epoch_loss /= static_cast<double>(ws.size());
    if (!std::isfinite(epoch_loss)) {
      w = good;
      rep.diverged = true;
      return rep;
    }
    rep.loss_by_epoch.push_back(epoch_loss);
    good = w;
  }
  return rep;
}

double horizon_eval(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                    const PreparedRuns& data, int stride) {
  if (cfg.N_K != 1) throw ConfigError("mprnn: evaluation expects one birefringence latent");
  MpRnnConfig c = cfg;
  c.rh_stride = std::max(stride, 1);
  auto ws = rh_windows(data, c);
  if (ws.empty()) throw DataError("mprnn: no horizon windows");
  const auto N = static_cast<std::size_t>(cfg.N);
  const std::size_t W = N + 2 * static_cast<std::size_t>(cfg.b);
  const auto nv = static_cast<std::size_t>(cfg.N_v);

  double num = 0.0, den = 0.0;
  for (const auto& [r, s] : ws) {
    const auto& x = data.x[r];
    std::vector<Vec> controls(N);
    for (std::size_t k = 0; k < N; ++k)
      controls[k] = Vec(x[s + W + k].begin() + cfg.N_v, x[s + W + k].end());
    auto res = rollout(w, cfg, std::span<const Vec>(x).subspan(s, W), nullptr, nullptr,
                       &controls, nullptr);
    for (std::size_t k = 0; k < N; ++k) {
      for (std::size_t q = 0; q < nv; ++q) {
        const double t = x[s + W + k][q];
        const double e = res.v_hat[k][q] - t;
        num += e * e;
        den += t * t;
      }
      const double tk = data.k[r][s + W + k] / data.k_sigma;
      const double ek = res.k_hat[k] / data.k_sigma - tk;
      num += ek * ek;
      den += tk * tk;
    }
  }
  if (den <= 0.0) throw DataError("mprnn eval: degenerate truth");
  return std::sqrt(num / den);
}

}  // namespace mlfl::mprnn
