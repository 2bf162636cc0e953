// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "speclab/linalg.hpp"
#include "speclab/model.hpp"

namespace speclab::optim {

enum class Kind { AdamW, Muon, NorMuon, Dion };

// Matrix-class parameters take the named matrix optimizer; everything else
// (embedding, norm gains, LM head) runs on the Lion scalar path, except
// under AdamW which treats every parameter elementwise.
struct OptimizerConfig {
  Kind kind = Kind::AdamW;
  double lr = 3e-3;         // matrix / AdamW learning rate
  double scalar_lr = 1e-3;  // Lion path learning rate (matrix kinds only)
  double weight_decay = 0.01;
  double adamw_beta1 = 0.9;
  double adamw_beta2 = 0.95;  // also the NorMuon row-moment decay
  double momentum = 0.95;     // Muon / NorMuon / Dion
  double dion_rank_fraction = 0.25;
  int ns_iterations = 5;
  double epsilon = 1e-8;
  double lion_beta1 = 0.9;
  double lion_beta2 = 0.99;
  uint64_t seed = 1;  // derives the Dion right-factor warm start

  void validate() const;  // throws std::invalid_argument
};

template <class T>
struct AdamWState {
  std::vector<T> m, v;
  int64_t t = 0;
};

template <class T>
struct LionState {
  std::vector<T> c;
};

// Shared by Muon / NorMuon / Dion; unused members stay empty.
struct MatrixState {
  linalg::Matrix momentum;       // rows x cols
  std::vector<double> row_v;     // NorMuon per-row second moment
  int64_t t = 0;                 // NorMuon bias-correction step count
  linalg::Matrix q;              // Dion right factor, cols x k, unit columns
};

// Allocates the state a matrix parameter of the given store shape needs
// under cfg.kind. Dion's Q starts as deterministic random orthonormal
// columns drawn from cfg.seed xor salt, with k = ceil(r * min(rows, cols)).
MatrixState make_matrix_state(int rows, int cols, const OptimizerConfig& cfg,
                              uint64_t salt);

// One decoupled-weight-decay step with bias correction:
// param -= lr_t * (mhat / (sqrt(vhat) + eps) + wd * param).
template <class T>
void adamw_step(T* param, const T* grad, size_t n, AdamWState<T>& st,
                const OptimizerConfig& cfg, double lr_t);

// Sign update with interpolated momentum: u = sign(b1*c + (1-b1)*g),
// c <- b2*c + (1-b2)*g, param -= lr_t * (u + wd * param).
template <class T>
void lion_step(T* param, const T* grad, size_t n, LionState<T>& st,
               const OptimizerConfig& cfg, double lr_t);

// Quintic Newton-Schulz iteration toward U V^T of the input's SVD. The
// input is pre-scaled by its Frobenius norm; a zero matrix returns zero.
// Tall inputs are processed transposed so the Gram side stays small.
linalg::Matrix newton_schulz_orthogonalize(const linalg::Matrix& m, int iters);

// B <- mu*B + g; O = newton_schulz(B);
// param -= lr_t * s * O + lr_t * wd * param, s = sqrt(max(1, rows/cols)).
// rows/cols double as the functional (d_out, d_in) for every matrix-class
// parameter this model produces.
template <class T>
void muon_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
               const OptimizerConfig& cfg, double lr_t);

// Muon with per-row adaptive rescaling of O: v_i <- b2*v_i +
// (1-b2)*mean(O_i^2), row scale 1/(sqrt(vhat_i)+eps), then a global
// rescale restores the original Frobenius norm before the update.
template <class T>
void normuon_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
                  const OptimizerConfig& cfg, double lr_t);

// Low-rank orthonormal update with error feedback:
// B <- mu*B + g; P = B Q; Phat = qr(P).q; R = B^T Phat;
// B <- B - (1-mu) Phat R^T; Q <- column-normalized R;
// param -= lr_t * s * Phat Q^T + lr_t * wd * param. rank(update) <= k.
template <class T>
void dion_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
               const OptimizerConfig& cfg, double lr_t);

enum class Route { AdamW, Lion, Matrix };

// AdamW kind: every view -> AdamW. Matrix kinds: matrix_class views take
// the matrix path, the rest go to Lion.
std::vector<Route> route_parameters(
    const std::vector<model::ParamView<float>>& views,
    const OptimizerConfig& cfg);

// Constant base_lr through 80% of training, then linear decay to zero.
// Throws std::invalid_argument outside 0 <= step <= total_steps.
double lr_schedule(int64_t step, int64_t total_steps, double base_lr);

// Bundles per-parameter state for a whole model. The views passed to
// step() must match the construction views in order and shape.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg,
            const std::vector<model::ParamView<float>>& views);

  // lr_t is the scheduled matrix/AdamW rate; the Lion path scales it by
  // scalar_lr / lr so both follow the same schedule shape.
  void step(const std::vector<model::ParamView<float>>& params,
            const std::vector<model::ParamView<float>>& grads, double lr_t);

  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<Route>& routes() const { return routes_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Route> routes_;
  std::vector<AdamWState<float>> adamw_;   // parallel to views
  std::vector<LionState<float>> lion_;     // parallel to views
  std::vector<MatrixState> matrix_;        // parallel to views
};

}  // namespace speclab::optim
