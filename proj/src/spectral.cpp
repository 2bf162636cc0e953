// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace speclab::spectral {

CovAccumulator::CovAccumulator(int d) : dim(d) {
  if (d <= 0) throw std::invalid_argument("CovAccumulator: dim must be > 0");
  sum.assign(static_cast<size_t>(d), 0.0);
  outer.assign(static_cast<size_t>(d) * d, 0.0);
}

void CovAccumulator::add_rows(const double* h, int n_rows, int ldh) {
  if (n_rows <= 0) return;
  linalg::syrk_upper_acc(n_rows, dim, h, ldh, outer.data(), dim);
  for (int t = 0; t < n_rows; ++t) {
    const double* row = h + static_cast<size_t>(t) * ldh;
    for (int j = 0; j < dim; ++j) sum[j] += row[j];
  }
  n += static_cast<uint64_t>(n_rows);
}

void CovAccumulator::merge(const CovAccumulator& other) {
  if (other.dim != dim) throw std::invalid_argument("CovAccumulator::merge: dim mismatch");
  n += other.n;
  for (size_t i = 0; i < sum.size(); ++i) sum[i] += other.sum[i];
  for (int i = 0; i < dim; ++i)
    for (int j = i; j < dim; ++j)
      outer[static_cast<size_t>(i) * dim + j] += other.outer[static_cast<size_t>(i) * dim + j];
}

linalg::Matrix CovAccumulator::covariance() const {
  if (n < 2) throw std::runtime_error("CovAccumulator::covariance: need at least 2 samples");
  linalg::Matrix c(dim, dim);
  const double nn = static_cast<double>(n);
  for (int i = 0; i < dim; ++i) {
    double mi = sum[i] / nn;
    for (int j = i; j < dim; ++j) {
      double mj = sum[j] / nn;
      double v = (outer[static_cast<size_t>(i) * dim + j] - nn * mi * mj) / (nn - 1.0);
      c.at(i, j) = v;
      c.at(j, i) = v;
    }
  }
  return c;
}

EigenSpectrum covariance_spectrum(const CovAccumulator& acc) {
  linalg::Matrix c = acc.covariance();
  std::vector<double> ev = linalg::symmetric_eigenvalues(c);

  EigenSpectrum s;
  s.dim = acc.dim;
  s.n_samples = acc.n;
  for (double& v : ev)
    if (v < 0.0) v = 0.0;
  double lmax = ev.empty() ? 0.0 : ev.front();
  double floor = 1e-12 * lmax;
  double trace = 0.0;
  for (double& v : ev) {
    if (v < floor) v = 0.0;
    trace += v;
  }
  s.p.assign(ev.size(), 0.0);
  if (trace <= 0.0) {
    s.degenerate = true;
    return s;
  }
  for (size_t i = 0; i < ev.size(); ++i) s.p[i] = ev[i] / trace;
  return s;
}

double renyi_rank(const EigenSpectrum& s, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("renyi_rank: alpha must be > 0");
  if (s.degenerate) return 0.0;
  // A flat spectrum has rank equal to its support size at every order;
  // return that exactly instead of going through the pow/log/exp round trip.
  {
    double first = 0.0;
    uint64_t support = 0;
    bool flat = true;
    for (double p : s.p) {
      if (p <= 0.0) continue;
      if (support == 0) first = p;
      else if (p != first) flat = false;
      ++support;
    }
    if (flat && support > 0) return static_cast<double>(support);
  }
  if (std::abs(alpha - 1.0) < 1e-9) {
    double h = 0.0;
    for (double p : s.p)
      if (p > 0.0) h -= p * std::log(p);
    return std::exp(h);
  }
  double z = 0.0;
  for (double p : s.p)
    if (p > 0.0) z += std::pow(p, alpha);
  double h = std::log(z) / (1.0 - alpha);
  return std::exp(h);
}

SoftHard soft_hard_ranks(const EigenSpectrum& s) {
  SoftHard out;
  if (s.degenerate) return out;
  out.soft = renyi_rank(s, 1.0);
  out.hard = renyi_rank(s, 2.0);
  out.asymmetry = std::log(out.soft) - std::log(out.hard);
  return out;
}

double reinjection_ratio(double pre_rank, double post_rank) {
  if (!(pre_rank > 0.0))
    throw std::invalid_argument("reinjection_ratio: pre rank must be > 0");
  return post_rank / pre_rank;
}

const std::vector<double>& default_alphas() {
  static const std::vector<double> a = {0.5, 1.0, 1.5, 2.0, 3.0, 5.0};
  return a;
}

RankProfile rank_profile(const EigenSpectrum& s, const std::vector<double>& alphas) {
  RankProfile out;
  out.alphas = alphas;
  out.ranks.reserve(alphas.size());
  for (double a : alphas) out.ranks.push_back(renyi_rank(s, a));
  SoftHard sh = soft_hard_ranks(s);
  out.soft = sh.soft;
  out.hard = sh.hard;
  out.asymmetry = sh.asymmetry;
  out.dim = s.dim;
  out.n_samples = s.n_samples;
  return out;
}

PositionAccumulator::PositionAccumulator(int d, int positions)
    : dim(d), n_positions(positions) {
  if (d <= 0 || positions <= 0)
    throw std::invalid_argument("PositionAccumulator: dims must be > 0");
  count.assign(static_cast<size_t>(positions), 0);
  sum.assign(static_cast<size_t>(positions) * d, 0.0);
  sumsq.assign(static_cast<size_t>(positions) * d, 0.0);
}

template <class T>
static void add_row_impl(PositionAccumulator& acc, const T* h, int position) {
  double* s = acc.sum.data() + static_cast<size_t>(position) * acc.dim;
  double* q = acc.sumsq.data() + static_cast<size_t>(position) * acc.dim;
  for (int j = 0; j < acc.dim; ++j) {
    double v = static_cast<double>(h[j]);
    s[j] += v;
    q[j] += v * v;
  }
  ++acc.count[static_cast<size_t>(position)];
}

void PositionAccumulator::add_row(const float* h, int position) {
  add_row_impl(*this, h, position);
}
void PositionAccumulator::add_row(const double* h, int position) {
  add_row_impl(*this, h, position);
}

void PositionAccumulator::merge(const PositionAccumulator& other) {
  if (other.dim != dim || other.n_positions != n_positions)
    throw std::invalid_argument("PositionAccumulator::merge: shape mismatch");
  for (size_t i = 0; i < count.size(); ++i) count[i] += other.count[i];
  for (size_t i = 0; i < sum.size(); ++i) sum[i] += other.sum[i];
  for (size_t i = 0; i < sumsq.size(); ++i) sumsq[i] += other.sumsq[i];
}

double symmetry_ratio(const PositionAccumulator& acc) {
  uint64_t total = 0;
  for (uint64_t c : acc.count) total += c;
  if (total < 2) throw std::runtime_error("symmetry_ratio: need at least 2 samples");
  const double nn = static_cast<double>(total);

  double eta_sum = 0.0;
  int counted = 0;
  for (int j = 0; j < acc.dim; ++j) {
    double grand = 0.0, sq = 0.0, between = 0.0;
    for (int p = 0; p < acc.n_positions; ++p) {
      size_t idx = static_cast<size_t>(p) * acc.dim + j;
      grand += acc.sum[idx];
      sq += acc.sumsq[idx];
      if (acc.count[p] > 0)
        between += acc.sum[idx] * acc.sum[idx] / static_cast<double>(acc.count[p]);
    }
    double correction = grand * grand / nn;
    double ss_total = sq - correction;
    double ss_between = between - correction;
    if (ss_total > 0.0) {
      double eta = ss_between / ss_total;
      eta = std::min(1.0, std::max(0.0, eta));
      eta_sum += eta;
      ++counted;
    }
  }
  if (counted == 0)
    throw std::runtime_error("symmetry_ratio: all units constant (degenerate probe)");
  return 1.0 - eta_sum / counted;
}

double head_tail_bias(const SymmetryStats& head, const SymmetryStats& tail) {
  return head.delta - tail.delta;
}

}  // namespace speclab::spectral
