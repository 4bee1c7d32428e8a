// SPDX-License-Identifier: Apache-2.0
// Model-prediction recurrent network: encoder/decoder cells over windows of
// (E, M, alpha) records that predict birefringence and the next laser state
// N steps ahead, plus the three training stages (conditional-RBM seeding of
// the input matrices, single-step regression, receding-horizon BPTT).
//
// Cell dataflow, hidden layers relu, outputs affine:
//   h_lp  = relu(W_l_past^T  x_past + b_l_past)
//   h_lc  = relu(W_l_current^T x_cur + b_l_current)
//   l_cur = relu(W_hl^T (h_lp.h_lc) + W_ll^T l_past + b_hl)
//   h_lat = relu(W_l^T l_cur + b_latent)
//   K^    = W_Ko^T h_lat + b_Ko
//   alpha = mapped from K^ (proposal mode) or supplied (override mode)
//   h_cur = relu(W_current^T x_cur + b_current)
//   h_fut = relu(W_future^T u_fut + b_future)
//   v^    = W_o^T (h_lat.h_cur.h_fut) + b_o
// where . is the elementwise product. x windows hold b records each, the
// control window holds the b entries ending at and including u_{t+1}.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mlfl/kmap.hpp"
#include "mlfl/nn.hpp"
#include "mlfl/rng.hpp"

namespace mlfl::mprnn {

using nn::Vec;

// One controller step of the logged plant, raw units.
struct StepRecord {
  double e = 0.0;
  double m = 1.0;
  std::array<double, 4> alpha{};
  double k = 0.0;  // simulator-true birefringence (supervision signal)
};
using Sequence = std::vector<StepRecord>;

struct MpRnnConfig {
  int N = 10;  // prediction horizon
  int b = 5;   // input window half-length
  int N_x = 6;
  int N_u = 4;
  int N_h = 32;
  int N_l = 16;
  int N_K = 1;
  int N_v = 2;

  // stage 1: conditional RBM per input pathway, CD-1 on standardized windows
  int crbm_epochs = 10;
  double crbm_lr = 1e-3;
  // stage 2: single-step Adam
  int ss_epochs = 40;
  int ss_batch = 32;
  double ss_lr = 2e-3;
  // stage 3: receding-horizon BPTT
  int rh_epochs = 20;
  int rh_batch = 16;
  double rh_lr = 5e-4;
  int rh_stride = 1;   // window subsampling along each run
  double clip = 5.0;   // global gradient-norm cap, <= 0 disables
  double lambda_k = 1.0;  // weight of the birefringence supervision term

  void validate() const;  // throws ConfigError on nonpositive dims
};

// Every weight of the cell. b_latent is N_h wide: it biases h_lat, whose
// width is fixed by the elementwise products and the K readout.
struct MpRnnCellWeights {
  nn::Mat W_l_past, W_l_current;  // N_x b x N_h
  nn::Mat W_hl;                   // N_h x N_l
  nn::Mat W_ll;                   // N_l x N_l
  nn::Mat W_current;              // N_x b x N_h
  nn::Mat W_future;               // N_u b x N_h
  nn::Mat W_l;                    // N_l x N_h
  nn::Mat W_Ko;                   // N_h x N_K
  nn::Mat W_o;                    // N_h x N_v
  Vec b_l_past, b_l_current, b_hl, b_current, b_future, b_latent, b_Ko, b_o;
};

MpRnnCellWeights make_weights(const MpRnnConfig& cfg, SeededRng& rng);
// Fixed span order shared by the optimizer, gradients, and serialization.
nn::ParamRefs param_refs(MpRnnCellWeights& w);
// Gradient storage reuses the weight struct; flat() follows param_refs order.
void zero_weights(MpRnnCellWeights& w);
std::vector<Vec> flat_grads(const MpRnnCellWeights& g);

// Standardized runs ready for training: x rows are 6-wide (E, M, alpha),
// k keeps raw units with its own scale for the evaluation metric.
struct PreparedRuns {
  std::vector<std::vector<Vec>> x;
  std::vector<Vec> k;
  nn::Standardizer stats;
  double k_sigma = 1.0;
};
PreparedRuns prepare_runs(const std::vector<Sequence>& runs);
// Held-out variant: reuse the training statistics.
PreparedRuns prepare_runs(const std::vector<Sequence>& runs, const nn::Standardizer& stats,
                          double k_sigma);

// Forward state of one cell, kept for backpropagation.
struct CellTape {
  bool encoder = false;   // l-chain only
  bool proposal = false;  // alpha_next came from the K->alpha map
  Vec x_past, x_cur, u_fut, l_past;
  Vec pre_lp, h_lp, pre_lc, h_lc, pre_l, l_cur;
  Vec pre_lat, h_lat, pre_cur, h_cur, pre_fut, h_fut;
  Vec m_l, m_o;
  Vec k_hat;                        // width N_K
  kmap::KMapCache km_cache;         // proposal mode
  Vec alpha_scale;                  // 1/stddev of each control column (proposal)
  std::array<double, 4> alpha_raw{};  // wrapped angles, raw units (proposal)
  Vec alpha_std;                    // control appended to the stream
  Vec v_hat;                        // width N_v
};

struct CellOut {
  Vec l_cur;
  Vec k_hat;
  Vec alpha_std;                    // width N_u
  std::array<double, 4> alpha_raw{};
  Vec v_hat;
};

// One decoder cell. u_fut carries the b-entry control window whose final
// N_u slot is overwritten by the standardized kmap proposal when km is given
// (stats supplies the alpha-column scaling); otherwise the slot is the
// caller's control. Encoder cells are run by passing encoder=true, which
// stops after l_cur.
CellOut cell_forward(const MpRnnCellWeights& w, const MpRnnConfig& cfg, const Vec& x_past,
                     const Vec& x_cur, Vec u_fut, const Vec& l_past,
                     const kmap::KMapModel* km, const nn::Standardizer* stats,
                     bool encoder, CellTape* tape);

// Upstream gradients entering one cell.
struct CellBackIn {
  Vec dv;         // dL/dv_hat (empty means zero)
  Vec dk;         // dL/dK_hat, external part
  Vec dl;         // dL/dl_cur from the next cell
  Vec dalpha_std; // proposal mode: stream gradient of the appended control
};
struct CellBackOut {
  Vec dx_past, dx_cur;
  Vec du_fut;  // final N_u slot zeroed in proposal mode (consumed by the map)
  Vec dl_past;
};
CellBackOut cell_backward(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                          const CellTape& tape, const CellBackIn& in,
                          const kmap::KMapModel* km, MpRnnCellWeights& grads);

// N encoder cells over real history followed by N decoder cells whose
// predictions extend the record stream. stream holds exactly N + 2b
// standardized records ending at the current step. controls_std (N rows of
// width N_u) overrides the proposed angles; otherwise km + stats propose
// them. Deterministic given weights, stream, and controls.
struct RolloutResult {
  Vec k_hat;                 // N entries
  std::vector<Vec> v_hat;    // N rows, width N_v
  std::vector<std::array<double, 4>> alpha_raw;  // proposal mode only
};
struct RolloutTape {
  std::vector<CellTape> cells;  // N encoder then N decoder
  std::size_t n_real = 0;       // stream length backing the windows
};
RolloutResult rollout(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                      std::span<const Vec> stream, const kmap::KMapModel* km,
                      const nn::Standardizer* stats,
                      const std::vector<Vec>* controls_std, RolloutTape* tape);

// BPTT through the rollout. dv has N rows, dk N entries; gradients
// accumulate into grads. With overridden controls, dcontrols_out (N rows,
// width N_u) receives the objective gradient of each planned control.
void rollout_backward(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                      const RolloutTape& tape, const std::vector<Vec>& dv, const Vec& dk,
                      const kmap::KMapModel* km, MpRnnCellWeights& grads,
                      std::vector<Vec>* dcontrols_out);

// Ring of raw step records plus the statistics needed to standardize reads.
class HistoryBuffer {
 public:
  HistoryBuffer(std::size_t capacity, nn::Standardizer stats);
  void push(const StepRecord& r);
  std::size_t size() const { return count_ < cap_ ? count_ : cap_; }
  // Last n records, oldest first, standardized; throws DataError when fewer
  // than n records have been pushed.
  std::vector<Vec> last_std(std::size_t n) const;
  const nn::Standardizer& stats() const { return stats_; }

 private:
  std::size_t cap_, count_ = 0;
  std::vector<StepRecord> ring_;
  nn::Standardizer stats_;
};

struct TrainReport {
  Vec loss_by_epoch;
  bool diverged = false;       // nonfinite loss or gradient ended the stage
  double max_grad_norm = 0.0;  // before clipping
};

struct CrbmReport {
  // Mean squared reconstruction error per pathway (l_past, l_current,
  // current, future), before and after training.
  std::array<double, 4> recon_before{}, recon_after{};
};

// Stage 1: one conditional RBM per input pathway (Gaussian visibles on the
// standardized window, logistic hiddens, conditioning window shifted b steps
// earlier, CD-1 with mean-field reconstruction). The learned visible-hidden
// weights and hidden biases seed W_l_past, W_l_current, W_current, W_future
// and their biases in place.
CrbmReport crbm_pretrain(MpRnnCellWeights& w, const PreparedRuns& data,
                         const MpRnnConfig& cfg, SeededRng& rng);

// Stage 2: Adam on the one-step loss
//   0.5 |v^ - v|^2 + 0.5 lambda_k ((K^ - K) / k_sigma)^2
// with l_past = 0 and teacher-forced controls. The birefringence residual is
// scaled like the evaluation metric so both objectives carry equal weight.
TrainReport train_single_step(MpRnnCellWeights& w, const PreparedRuns& data,
                              const MpRnnConfig& cfg, SeededRng& rng);

// Stage 3: BPTT over the N-step rollout (teacher-forced controls, self-fed
// state predictions), same per-step loss summed along the horizon, global
// gradient-norm clipping. A nonfinite loss or gradient restores the last
// epoch's weights and stops.
TrainReport train_receding_horizon(MpRnnCellWeights& w, const PreparedRuns& data,
                                   const MpRnnConfig& cfg, SeededRng& rng);

// Aggregate N-step relative error over every stride-th window of data:
// sqrt(sum |resid|^2 / sum |truth|^2) where each step contributes the
// standardized state residual and the birefringence residual scaled by
// 1/k_sigma.
double horizon_eval(const MpRnnCellWeights& w, const MpRnnConfig& cfg,
                    const PreparedRuns& data, int stride = 1);

}  // namespace mlfl::mprnn
