// SPDX-License-Identifier: Apache-2.0
#include "mlfl/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "mlfl/errors.hpp"
#include "mlfl/kernels.hpp"

namespace mlfl::nn {

void DenseGrad::zero() {
  std::fill(dW.d.begin(), dW.d.end(), 0.0);
  std::fill(db.begin(), db.end(), 0.0);
}

Vec Standardizer::apply(const Vec& x) const {
  if (x.size() != mean.size()) throw std::invalid_argument("standardizer: size mismatch");
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean[i]) / stddev[i];
  return y;
}

Vec Standardizer::invert(const Vec& x) const {
  if (x.size() != mean.size()) throw std::invalid_argument("standardizer: size mismatch");
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * stddev[i] + mean[i];
  return y;
}

Standardizer Standardizer::fit(const std::vector<Vec>& rows) {
  if (rows.empty()) throw DataError("standardizer: no rows");
  const std::size_t d = rows[0].size();
  Standardizer s;
  s.mean.assign(d, 0.0);
  s.stddev.assign(d, 0.0);
  for (const auto& r : rows) {
    if (r.size() != d) throw DataError("standardizer: ragged rows");
    for (std::size_t i = 0; i < d; ++i) s.mean[i] += r[i];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) {
      const double c = r[i] - s.mean[i];
      s.stddev[i] += c * c;
    }
  for (auto& v : s.stddev) v = std::max(std::sqrt(v / static_cast<double>(rows.size())), 1e-12);
  return s;
}

namespace {

void apply_act(Act a, Vec& y) {
  if (a == Act::relu)
    for (auto& x : y)
      if (x < 0.0) x = 0.0;
}

}  // namespace

Vec dense_forward(const Dense& l, const Vec& x) {
  if (x.size() != l.n_in()) throw std::invalid_argument("dense_forward: input size mismatch");
  Vec y = l.b;
  kernels::active().matvec_t(l.W.data(), x.data(), y.data(), l.n_in(), l.n_out());
  apply_act(l.act, y);
  return y;
}

Vec dense_forward_cached(const Dense& l, const Vec& x, DenseCache& cache) {
  if (x.size() != l.n_in()) throw std::invalid_argument("dense_forward: input size mismatch");
  cache.x = x;
  cache.pre = l.b;
  kernels::active().matvec_t(l.W.data(), x.data(), cache.pre.data(), l.n_in(), l.n_out());
  Vec y = cache.pre;
  apply_act(l.act, y);
  return y;
}

Vec dense_backward(const Dense& l, const DenseCache& cache, const Vec& dy,
                   DenseGrad* grad) {
  if (dy.size() != l.n_out()) throw std::invalid_argument("dense_backward: dy size mismatch");
  Vec dpre = dy;
  if (l.act == Act::relu) {
    // subgradient 0 at the kink
    for (std::size_t i = 0; i < dpre.size(); ++i)
      if (cache.pre[i] <= 0.0) dpre[i] = 0.0;
  }
  if (grad) {
    kernels::active().outer_acc(grad->dW.data(), cache.x.data(), dpre.data(), l.n_in(),
                                l.n_out());
    kernels::active().axpy(grad->db.data(), 1.0, dpre.data(), l.n_out());
  }
  Vec dx(l.n_in());
  kernels::active().matvec(l.W.data(), dpre.data(), dx.data(), l.n_in(), l.n_out());
  return dx;
}

Vec Mlp::forward(const Vec& x) const {
  Vec h = x;
  for (const auto& l : layers) h = dense_forward(l, h);
  return h;
}

Vec Mlp::forward_cached(const Vec& x, std::vector<DenseCache>& caches) const {
  caches.resize(layers.size());
  Vec h = x;
  for (std::size_t i = 0; i < layers.size(); ++i)
    h = dense_forward_cached(layers[i], h, caches[i]);
  return h;
}

Vec Mlp::backward(const std::vector<DenseCache>& caches, const Vec& dy,
                  std::vector<DenseGrad>* grads) const {
  if (caches.size() != layers.size())
    throw std::invalid_argument("mlp backward: cache count mismatch");
  Vec d = dy;
  for (std::size_t i = layers.size(); i-- > 0;)
    d = dense_backward(layers[i], caches[i], d, grads ? &(*grads)[i] : nullptr);
  return d;
}

std::vector<DenseGrad> make_grads(const Mlp& m) {
  std::vector<DenseGrad> g;
  g.reserve(m.layers.size());
  for (const auto& l : m.layers) g.emplace_back(l);
  return g;
}

void xavier_init(Mat& w, SeededRng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
  for (auto& x : w.d) x = rng.uniform(-s, s);
}

Mlp make_mlp(const std::vector<std::size_t>& widths, Act hidden, Act output,
             SeededRng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need at least two widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = (i + 2 == widths.size());
    Dense l(widths[i], widths[i + 1], last ? output : hidden);
    xavier_init(l.W, rng);
    m.layers.push_back(std::move(l));
  }
  return m;
}

Adam::Adam(const ParamRefs& params, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(const ParamRefs& params, const std::vector<Vec>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("adam: segment count mismatch");
  for (std::size_t s = 0; s < params.size(); ++s) {
    if (params[s].size() != m_[s].size() || grads[s].size() != m_[s].size())
      throw std::invalid_argument("adam: segment size mismatch");
    for (double g : grads[s])
      if (!std::isfinite(g)) throw NonfiniteGradient("nonfinite gradient in adam step");
  }
  ++t_;
  const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t s = 0; s < params.size(); ++s) {
    auto& m = m_[s];
    auto& v = v_[s];
    auto p = params[s];
    const auto& g = grads[s];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / b1t;
      const double vhat = v[i] / b2t;
      p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double clip_global_norm(std::vector<Vec>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    sq += kernels::active().dot(g.data(), g.data(), g.size());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g) x *= scale;
  }
  return norm;
}

double grad_check(const std::function<double()>& loss, const ParamRefs& params,
                  const std::vector<Vec>& analytic, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("grad_check: delta must be positive");
  if (params.size() != analytic.size())
    throw std::invalid_argument("grad_check: segment count mismatch");
  double worst = 0.0;
  for (std::size_t s = 0; s < params.size(); ++s) {
    auto p = params[s];
    if (p.size() != analytic[s].size())
      throw std::invalid_argument("grad_check: segment size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + delta;
      const double up = loss();
      p[i] = keep - delta;
      const double dn = loss();
      p[i] = keep;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw std::runtime_error("grad_check: loss is nonfinite at a perturbed point");
      const double numeric = (up - dn) / (2.0 * delta);
      const double a = analytic[s][i];
      const double err = std::abs(numeric - a) /
                         std::max({std::abs(numeric), std::abs(a), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

void mat_mul_acc(const Mat& W, const Vec& x, Vec& y) {
  if (x.size() != W.rows || y.size() != W.cols)
    throw std::invalid_argument("mat_mul_acc: shape mismatch");
  kernels::active().matvec_t(W.data(), x.data(), y.data(), W.rows, W.cols);
}

Vec mat_t_mul(const Mat& W, const Vec& d) {
  if (d.size() != W.cols) throw std::invalid_argument("mat_t_mul: shape mismatch");
  Vec out(W.rows);
  kernels::active().matvec(W.data(), d.data(), out.data(), W.rows, W.cols);
  return out;
}

void outer_acc(Mat& W, const Vec& x, const Vec& d) {
  if (x.size() != W.rows || d.size() != W.cols)
    throw std::invalid_argument("outer_acc: shape mismatch");
  kernels::active().outer_acc(W.data(), x.data(), d.data(), W.rows, W.cols);
}

}  // namespace mlfl::nn
