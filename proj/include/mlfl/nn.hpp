// SPDX-License-Identifier: Apache-2.0
// Dense-network substrate shared by the inference, mapping, and predictor
// models: row-major matrices, relu/linear layers with hand-derived backward
// passes, Xavier init, Adam, and a central-difference gradient checker.
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlfl/rng.hpp"

namespace mlfl::nn {

using Vec = std::vector<double>;

struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec d;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), d(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return d[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
  double* data() { return d.data(); }
  const double* data() const { return d.data(); }
  std::size_t size() const { return d.size(); }
};

enum class Act { relu, linear };

// W is n_in x n_out: forward computes act(W^T x + b).
struct Dense {
  Mat W;
  Vec b;
  Act act = Act::relu;

  Dense() = default;
  Dense(std::size_t n_in, std::size_t n_out, Act a) : W(n_in, n_out), b(n_out, 0.0), act(a) {}
  std::size_t n_in() const { return W.rows; }
  std::size_t n_out() const { return W.cols; }
};

// Per-layer gradient accumulator, same shapes as the layer.
struct DenseGrad {
  Mat dW;
  Vec db;
  DenseGrad() = default;
  explicit DenseGrad(const Dense& l) : dW(l.W.rows, l.W.cols), db(l.b.size(), 0.0) {}
  void zero();
};

// Forward state needed by the backward pass.
struct DenseCache {
  Vec x;    // input
  Vec pre;  // W^T x + b, before the activation
};

Vec dense_forward(const Dense& l, const Vec& x);
Vec dense_forward_cached(const Dense& l, const Vec& x, DenseCache& cache);
// Returns dL/dx given dL/dy; accumulates into grad if non-null.
Vec dense_backward(const Dense& l, const DenseCache& cache, const Vec& dy,
                   DenseGrad* grad);

// Stack of layers applied in order.
struct Mlp {
  std::vector<Dense> layers;
  Vec forward(const Vec& x) const;
  Vec forward_cached(const Vec& x, std::vector<DenseCache>& caches) const;
  Vec backward(const std::vector<DenseCache>& caches, const Vec& dy,
               std::vector<DenseGrad>* grads) const;
};

std::vector<DenseGrad> make_grads(const Mlp& m);

// U(-s, s) with s = sqrt(6/(n_in+n_out)).
void xavier_init(Mat& w, SeededRng& rng);
Mlp make_mlp(const std::vector<std::size_t>& widths, Act hidden, Act output,
             SeededRng& rng);

// Flat parameter views; update order is the span order, which every model
// keeps fixed, so optimizer state lines up deterministically.
using ParamRefs = std::vector<std::span<double>>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParamRefs& params, AdamConfig cfg);
  // grads[i] must mirror params[i]; throws NonfiniteGradient and leaves the
  // parameters untouched if any gradient entry is nonfinite.
  void step(const ParamRefs& params, const std::vector<Vec>& grads);
  long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Vec> m_, v_;
  long t_ = 0;
};

// Rescales grads in place to cap the global L2 norm; returns the pre-clip norm.
double clip_global_norm(std::vector<Vec>& grads, double max_norm);

// Max relative error between analytic gradients and central differences of
// loss(); loss is evaluated with the parameters perturbed in place.
double grad_check(const std::function<double()>& loss, const ParamRefs& params,
                  const std::vector<Vec>& analytic, double delta);

// Row-major helpers used across models.
void mat_mul_acc(const Mat& W, const Vec& x, Vec& y);   // y += W^T x
Vec mat_t_mul(const Mat& W, const Vec& d);              // W d
void outer_acc(Mat& W, const Vec& x, const Vec& d);     // W += x d^T

// Per-component affine normalization fitted on training rows only.
struct Standardizer {
  Vec mean, stddev;  // stddev floored at 1e-12 when fitted
  Vec apply(const Vec& x) const;
  Vec invert(const Vec& x) const;
  static Standardizer fit(const std::vector<Vec>& rows);
};

}  // namespace mlfl::nn
