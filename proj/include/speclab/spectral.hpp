// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "speclab/linalg.hpp"

namespace speclab::spectral {

// Streaming second-moment accumulator for representation covariance:
// sample count, running sum, and the upper triangle of sum(h h^T).
// Accumulation is always double precision.
struct CovAccumulator {
  int dim = 0;
  uint64_t n = 0;
  std::vector<double> sum;    // dim
  std::vector<double> outer;  // dim * dim, upper triangle valid

  CovAccumulator() = default;
  explicit CovAccumulator(int d);

  // h: n_rows x dim block, row-major with leading dimension ldh.
  void add_rows(const double* h, int n_rows, int ldh);
  void merge(const CovAccumulator& other);

  // Unbiased covariance (1/(n-1)); requires n >= 2.
  linalg::Matrix covariance() const;
};

struct EigenSpectrum {
  int dim = 0;
  uint64_t n_samples = 0;
  std::vector<double> p;    // descending; sums to 1 unless degenerate
  bool degenerate = false;  // zero trace after clamping
};

// Eigenvalues of the accumulated covariance, clamped at zero, entries below
// 1e-12 * lambda_max zeroed, then trace-normalized. A zero-trace covariance
// comes back flagged degenerate instead of throwing.
EigenSpectrum covariance_spectrum(const CovAccumulator& acc);

// exp of the order-alpha Renyi entropy of the spectrum. alpha must be > 0;
// values within 1e-9 of 1 take the Shannon limit. Degenerate spectra give 0.
double renyi_rank(const EigenSpectrum& s, double alpha);

struct SoftHard {
  double soft = 0.0;        // exp(Shannon entropy)
  double hard = 0.0;        // participation ratio, 1 / sum p^2
  double asymmetry = 0.0;   // log soft - log hard, >= 0
};
SoftHard soft_hard_ranks(const EigenSpectrum& s);

// post/pre ratio of a rank measurement at one alpha; pre must be positive.
double reinjection_ratio(double pre_rank, double post_rank);

const std::vector<double>& default_alphas();  // 0.5, 1, 1.5, 2, 3, 5

struct RankProfile {
  std::vector<double> alphas;
  std::vector<double> ranks;  // parallel to alphas
  double soft = 0.0, hard = 0.0, asymmetry = 0.0;
  int dim = 0;
  uint64_t n_samples = 0;
};
RankProfile rank_profile(const EigenSpectrum& s, const std::vector<double>& alphas);

// Per-position first and second moments of every hidden unit. Feeds the
// positional-symmetry diagnostic without retaining activations.
struct PositionAccumulator {
  int dim = 0;
  int n_positions = 0;
  std::vector<uint64_t> count;  // per position
  std::vector<double> sum;      // n_positions * dim
  std::vector<double> sumsq;    // n_positions * dim

  PositionAccumulator() = default;
  PositionAccumulator(int d, int positions);
  void add_row(const float* h, int position);
  void add_row(const double* h, int position);
  void merge(const PositionAccumulator& other);
};

// SR = 1 - mean_j eta2_j where eta2_j is the between-position share of unit
// j's total sum of squares; units with zero total variation are skipped.
// Throws if every unit is degenerate or fewer than two samples were seen.
double symmetry_ratio(const PositionAccumulator& acc);

struct SymmetryStats {
  double sr_pre = 0.0;
  double sr_post = 0.0;
  double delta = 0.0;  // sr_post - sr_pre
};

// HEAD-minus-TAIL difference of delta-SR.
double head_tail_bias(const SymmetryStats& head, const SymmetryStats& tail);

}  // namespace speclab::spectral
