// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace speclab::optim {

using linalg::Matrix;

namespace {

template <class T>
void check_finite(const T* g, size_t n, const char* who) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(g[i])))
      throw std::runtime_error(std::string(who) + ": non-finite gradient");
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

double frob(const Matrix& a) {
  double s = 0.0;
  for (double x : a.d) s += x * x;
  return std::sqrt(s);
}

double spectral_scale(int rows, int cols) {
  return std::sqrt(std::max(1.0, static_cast<double>(rows) / cols));
}

// B <- mu*B + g, with lazy zero-initialization of the buffer.
template <class T>
void momentum_update(Matrix& b, const T* grad, int rows, int cols, double mu) {
  if (b.rows == 0) b = Matrix(rows, cols);
  if (b.rows != rows || b.cols != cols)
    throw std::invalid_argument("optimizer: state shape mismatch");
  size_t n = b.size();
  for (size_t i = 0; i < n; ++i)
    b.d[i] = mu * b.d[i] + static_cast<double>(grad[i]);
}

template <class T>
void apply_matrix_update(T* param, const Matrix& o, double lr_t, double s,
                         double wd) {
  for (size_t i = 0; i < o.size(); ++i) {
    double p = static_cast<double>(param[i]);
    param[i] = static_cast<T>(p - lr_t * s * o.d[i] - lr_t * wd * p);
  }
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer: lr must be > 0");
  if (!(scalar_lr > 0.0))
    throw std::invalid_argument("optimizer: scalar_lr must be > 0");
  if (kind == Kind::Dion &&
      !(dion_rank_fraction > 0.0 && dion_rank_fraction <= 1.0))
    throw std::invalid_argument("optimizer: rank fraction outside (0, 1]");
  if (ns_iterations <= 0)
    throw std::invalid_argument("optimizer: ns_iterations must be > 0");
  if (!(epsilon > 0.0))
    throw std::invalid_argument("optimizer: epsilon must be > 0");
  auto in_unit = [](double x) { return x >= 0.0 && x < 1.0; };
  if (!in_unit(adamw_beta1) || !in_unit(adamw_beta2) || !in_unit(lion_beta1) ||
      !in_unit(lion_beta2))
    throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
}

MatrixState make_matrix_state(int rows, int cols, const OptimizerConfig& cfg,
                              uint64_t salt) {
  if (rows <= 0 || cols <= 0)
    throw std::invalid_argument("optimizer: state needs positive shape");
  MatrixState st;
  st.momentum = Matrix(rows, cols);
  if (cfg.kind == Kind::NorMuon) st.row_v.assign(rows, 0.0);
  if (cfg.kind == Kind::Dion) {
    int mn = std::min(rows, cols);
    int k = static_cast<int>(std::ceil(cfg.dion_rank_fraction * mn));
    k = std::clamp(k, 1, mn);
    // Distinct deterministic stream per parameter.
    linalg::Rng rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * (salt + 1)));
    Matrix g(cols, k);
    for (double& x : g.d) x = rng.next_normal();
    st.q = linalg::reduced_qr(g).q;
  }
  return st;
}

template <class T>
void adamw_step(T* param, const T* grad, size_t n, AdamWState<T>& st,
                const OptimizerConfig& cfg, double lr_t) {
  check_finite(grad, n, "adamw");
  if (st.m.empty()) {
    st.m.assign(n, T(0));
    st.v.assign(n, T(0));
  }
  if (st.m.size() != n)
    throw std::invalid_argument("adamw: state size mismatch");
  st.t += 1;
  double bc1 = 1.0 - std::pow(cfg.adamw_beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(cfg.adamw_beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < n; ++i) {
    double g = grad[i];
    double m = cfg.adamw_beta1 * st.m[i] + (1.0 - cfg.adamw_beta1) * g;
    double v = cfg.adamw_beta2 * st.v[i] + (1.0 - cfg.adamw_beta2) * g * g;
    st.m[i] = static_cast<T>(m);
    st.v[i] = static_cast<T>(v);
    double mhat = static_cast<double>(st.m[i]) / bc1;
    double vhat = static_cast<double>(st.v[i]) / bc2;
    double p = param[i];
    param[i] = static_cast<T>(
        p - lr_t * (mhat / (std::sqrt(vhat) + cfg.epsilon) +
                    cfg.weight_decay * p));
  }
}

template <class T>
void lion_step(T* param, const T* grad, size_t n, LionState<T>& st,
               const OptimizerConfig& cfg, double lr_t) {
  check_finite(grad, n, "lion");
  if (st.c.empty()) st.c.assign(n, T(0));
  if (st.c.size() != n) throw std::invalid_argument("lion: state size mismatch");
  for (size_t i = 0; i < n; ++i) {
    double g = grad[i];
    double c = st.c[i];
    double u = sign(cfg.lion_beta1 * c + (1.0 - cfg.lion_beta1) * g);
    st.c[i] = static_cast<T>(cfg.lion_beta2 * c + (1.0 - cfg.lion_beta2) * g);
    double p = param[i];
    param[i] = static_cast<T>(p - lr_t * (u + cfg.weight_decay * p));
  }
}

Matrix newton_schulz_orthogonalize(const Matrix& m, int iters) {
  constexpr double ka = 3.4445, kb = -4.7750, kc = 2.0315;
  bool flipped = m.rows > m.cols;
  Matrix x = flipped ? transpose(m) : m;
  // Norm is taken after the flip so a tall input and its transpose see the
  // same summation order and produce bitwise-identical results.
  double fn = frob(x);
  if (fn == 0.0) return m;
  for (double& v : x.d) v /= fn;

  int r = x.rows, n = x.cols;
  Matrix a(r, r), a2(r, r), poly(r, r), y(r, n);
  for (int it = 0; it < iters; ++it) {
    linalg::gemm_nt<double>(r, r, n, x.d.data(), n, x.d.data(), n, a.d.data(),
                            r, false);
    linalg::gemm_nn<double>(r, r, r, a.d.data(), r, a.d.data(), r, a2.d.data(),
                            r, false);
    for (size_t i = 0; i < poly.size(); ++i)
      poly.d[i] = kb * a.d[i] + kc * a2.d[i];
    linalg::gemm_nn<double>(r, n, r, poly.d.data(), r, x.d.data(), n,
                            y.d.data(), n, false);
    for (size_t i = 0; i < x.size(); ++i) x.d[i] = ka * x.d[i] + y.d[i];
  }
  return flipped ? transpose(x) : x;
}

template <class T>
void muon_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
               const OptimizerConfig& cfg, double lr_t) {
  check_finite(grad, static_cast<size_t>(rows) * cols, "muon");
  momentum_update(st.momentum, grad, rows, cols, cfg.momentum);
  Matrix o = newton_schulz_orthogonalize(st.momentum, cfg.ns_iterations);
  apply_matrix_update(param, o, lr_t, spectral_scale(rows, cols),
                      cfg.weight_decay);
}

template <class T>
void normuon_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
                  const OptimizerConfig& cfg, double lr_t) {
  check_finite(grad, static_cast<size_t>(rows) * cols, "normuon");
  momentum_update(st.momentum, grad, rows, cols, cfg.momentum);
  if (st.row_v.empty()) st.row_v.assign(rows, 0.0);
  if (static_cast<int>(st.row_v.size()) != rows)
    throw std::invalid_argument("normuon: state shape mismatch");
  Matrix o = newton_schulz_orthogonalize(st.momentum, cfg.ns_iterations);

  st.t += 1;
  double bc = 1.0 - std::pow(cfg.adamw_beta2, static_cast<double>(st.t));
  double before = frob(o);
  for (int i = 0; i < rows; ++i) {
    double ms = 0.0;
    const double* orow = o.row(i);
    for (int j = 0; j < cols; ++j) ms += orow[j] * orow[j];
    ms /= cols;
    st.row_v[i] = cfg.adamw_beta2 * st.row_v[i] + (1.0 - cfg.adamw_beta2) * ms;
    double vhat = st.row_v[i] / bc;
    double scale = 1.0 / (std::sqrt(vhat) + cfg.epsilon);
    for (int j = 0; j < cols; ++j) o.at(i, j) *= scale;
  }
  double after = frob(o);
  if (after > 0.0)
    for (double& v : o.d) v *= before / after;
  apply_matrix_update(param, o, lr_t, spectral_scale(rows, cols),
                      cfg.weight_decay);
}

template <class T>
void dion_step(T* param, const T* grad, int rows, int cols, MatrixState& st,
               const OptimizerConfig& cfg, double lr_t) {
  check_finite(grad, static_cast<size_t>(rows) * cols, "dion");
  if (st.q.rows != cols || st.q.cols <= 0)
    throw std::invalid_argument("dion: right factor not initialized");
  momentum_update(st.momentum, grad, rows, cols, cfg.momentum);
  Matrix& b = st.momentum;
  int k = st.q.cols;

  Matrix p(rows, k);
  linalg::gemm_nn<double>(rows, k, cols, b.d.data(), cols, st.q.d.data(), k,
                          p.d.data(), k, false);
  Matrix phat = linalg::reduced_qr(p).q;  // rows x k, orthonormal columns
  Matrix r(cols, k);
  linalg::gemm_tn<double>(cols, k, rows, b.d.data(), cols, phat.d.data(), k,
                          r.d.data(), k, false);

  // Error feedback keeps the unextracted residual in the momentum buffer.
  Matrix fb(rows, cols);
  linalg::gemm_nt<double>(rows, cols, k, phat.d.data(), k, r.d.data(), k,
                          fb.d.data(), cols, false);
  for (size_t i = 0; i < b.size(); ++i)
    b.d[i] -= (1.0 - cfg.momentum) * fb.d[i];

  // Next right factor: columns of R normalized to unit length.
  Matrix qn(cols, k);
  for (int j = 0; j < k; ++j) {
    double s = 0.0;
    for (int i = 0; i < cols; ++i) s += r.at(i, j) * r.at(i, j);
    double norm = std::sqrt(s);
    if (norm > 0.0)
      for (int i = 0; i < cols; ++i) qn.at(i, j) = r.at(i, j) / norm;
  }

  Matrix upd(rows, cols);
  linalg::gemm_nt<double>(rows, cols, k, phat.d.data(), k, qn.d.data(), k,
                          upd.d.data(), cols, false);
  apply_matrix_update(param, upd, lr_t, spectral_scale(rows, cols),
                      cfg.weight_decay);
  st.q = std::move(qn);
}

std::vector<Route> route_parameters(
    const std::vector<model::ParamView<float>>& views,
    const OptimizerConfig& cfg) {
  std::vector<Route> routes;
  routes.reserve(views.size());
  for (const auto& v : views) {
    if (cfg.kind == Kind::AdamW)
      routes.push_back(Route::AdamW);
    else
      routes.push_back(v.matrix_class ? Route::Matrix : Route::Lion);
  }
  return routes;
}

double lr_schedule(int64_t step, int64_t total_steps, double base_lr) {
  if (step < 0 || total_steps < 0 || step > total_steps)
    throw std::invalid_argument("schedule: step outside [0, total_steps]");
  if (5 * step <= 4 * total_steps) return base_lr;  // constant phase
  double frac = static_cast<double>(total_steps - step) / (0.2 * total_steps);
  return base_lr * frac;
}

Optimizer::Optimizer(const OptimizerConfig& cfg,
                     const std::vector<model::ParamView<float>>& views)
    : cfg_(cfg) {
  cfg_.validate();
  routes_ = route_parameters(views, cfg_);
  adamw_.resize(views.size());
  lion_.resize(views.size());
  matrix_.resize(views.size());
  for (size_t i = 0; i < views.size(); ++i)
    if (routes_[i] == Route::Matrix)
      matrix_[i] = make_matrix_state(views[i].store_rows, views[i].store_cols,
                                     cfg_, i);
}

void Optimizer::step(const std::vector<model::ParamView<float>>& params,
                     const std::vector<model::ParamView<float>>& grads,
                     double lr_t) {
  if (params.size() != routes_.size() || grads.size() != routes_.size())
    throw std::invalid_argument("optimizer: view count mismatch");
  double scalar_lr_t = lr_t * (cfg_.scalar_lr / cfg_.lr);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& pv = params[i];
    const auto& gv = grads[i];
    if (pv.size != gv.size)
      throw std::invalid_argument("optimizer: param/grad size mismatch");
    switch (routes_[i]) {
      case Route::AdamW:
        adamw_step(pv.data, gv.data, pv.size, adamw_[i], cfg_, lr_t);
        break;
      case Route::Lion:
        lion_step(pv.data, gv.data, pv.size, lion_[i], cfg_, scalar_lr_t);
        break;
      case Route::Matrix: {
        auto one = [&](auto fn) {
          fn(pv.data, gv.data, pv.store_rows, pv.store_cols, matrix_[i], cfg_,
             lr_t);
        };
        if (cfg_.kind == Kind::Muon)
          one(muon_step<float>);
        else if (cfg_.kind == Kind::NorMuon)
          one(normuon_step<float>);
        else
          one(dion_step<float>);
        break;
      }
    }
  }
}

template void adamw_step<float>(float*, const float*, size_t,
                                AdamWState<float>&, const OptimizerConfig&,
                                double);
template void adamw_step<double>(double*, const double*, size_t,
                                 AdamWState<double>&, const OptimizerConfig&,
                                 double);
template void lion_step<float>(float*, const float*, size_t, LionState<float>&,
                               const OptimizerConfig&, double);
template void lion_step<double>(double*, const double*, size_t,
                                LionState<double>&, const OptimizerConfig&,
                                double);
template void muon_step<float>(float*, const float*, int, int, MatrixState&,
                               const OptimizerConfig&, double);
template void muon_step<double>(double*, const double*, int, int, MatrixState&,
                                const OptimizerConfig&, double);
template void normuon_step<float>(float*, const float*, int, int, MatrixState&,
                                  const OptimizerConfig&, double);
template void normuon_step<double>(double*, const double*, int, int,
                                   MatrixState&, const OptimizerConfig&,
                                   double);
template void dion_step<float>(float*, const float*, int, int, MatrixState&,
                               const OptimizerConfig&, double);
template void dion_step<double>(double*, const double*, int, int, MatrixState&,
                                const OptimizerConfig&, double);

}  // namespace speclab::optim
