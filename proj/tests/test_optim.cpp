// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "speclab/model.hpp"
#include "speclab/optim.hpp"
#include "testutil.hpp"

using namespace speclab::optim;
using speclab::linalg::EigResult;
using speclab::linalg::Matrix;
using speclab::linalg::matmul;
using speclab::linalg::reduced_qr;
using speclab::linalg::Rng;
using speclab::linalg::symmetric_eig;
using testutil::frob;
using testutil::identity;
using testutil::max_abs_diff;
using testutil::random_matrix;
using testutil::transpose;

namespace {

// Singular values (descending) via the eigendecomposition of M^T M.
std::vector<double> singular_values(const Matrix& m) {
  Matrix mtm = matmul(transpose(m), m);
  EigResult e = symmetric_eig(mtm);
  std::vector<double> sv;
  sv.reserve(e.values.size());
  for (double v : e.values) sv.push_back(std::sqrt(std::max(0.0, v)));
  return sv;
}

// Singular values via the symmetric embedding [[0, M^T], [M, 0]], whose
// eigenvalues are exactly +/- the singular values. Absolute accuracy is
// ~eps * sigma_max; the Gram route above loses small values below
// sqrt(eps) * sigma_max, so rank certification has to come through here.
std::vector<double> jw_singular_values(const Matrix& m) {
  int r = m.rows, c = m.cols;
  Matrix jw(r + c, r + c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      jw.at(c + i, j) = m.at(i, j);
      jw.at(j, c + i) = m.at(i, j);
    }
  EigResult e = symmetric_eig(jw);
  return std::vector<double>(e.values.begin(),
                             e.values.begin() + std::min(r, c));
}

// The scalar action of one quintic iteration on a singular value. The matrix
// map X <- aX + (bA + cA^2)X with A = XX^T is a polynomial in M M^T applied
// to M, so it moves each singular value through this map independently and
// leaves both singular bases untouched.
double ns_scalar(double x, int iters) {
  for (int it = 0; it < iters; ++it) {
    double x2 = x * x;
    x = x * (3.4445 + x2 * (-4.7750 + x2 * 2.0315));
  }
  return x;
}

// Random matrix with prescribed condition number, unit top singular value,
// and its exact factors exposed for oracle reconstruction.
struct SvdTriple {
  Matrix u;                // rows x k, orthonormal columns
  std::vector<double> sv;  // k values, log-spaced descending
  Matrix v;                // cols x k, orthonormal columns
  Matrix m;                // u * diag(sv) * v^T
};

SvdTriple conditioned_triple(Rng& rng, int rows, int cols, double cond) {
  int k = std::min(rows, cols);
  SvdTriple t;
  t.u = reduced_qr(random_matrix(rng, rows, k)).q;
  t.v = reduced_qr(random_matrix(rng, cols, k)).q;
  t.m = Matrix(rows, cols);
  for (int s = 0; s < k; ++s) {
    double sigma =
        k == 1 ? 1.0 : std::pow(cond, -static_cast<double>(s) / (k - 1));
    t.sv.push_back(sigma);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        t.m.at(i, j) += t.u.at(i, s) * sigma * t.v.at(j, s);
  }
  return t;
}

Matrix conditioned_matrix(Rng& rng, int rows, int cols, double cond) {
  return conditioned_triple(rng, rows, cols, cond).m;
}

OptimizerConfig matrix_cfg(Kind kind) {
  OptimizerConfig c;
  c.kind = kind;
  c.lr = 2e-2;
  c.weight_decay = 0.0;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  OptimizerConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = OptimizerConfig{};
  c.kind = Kind::Dion;
  c.dion_rank_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.dion_rank_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.dion_rank_fraction = 1.0;
  CHECK_NOTHROW(c.validate());
  c = OptimizerConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = OptimizerConfig{};
  c.ns_iterations = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("adamw first step matches the hand-derived values") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  double theta = 1.0, g = 1.0;
  AdamWState<double> st;
  adamw_step(&theta, &g, 1, st, cfg, 0.1);
  CHECK(st.t == 1);
  CHECK(st.m[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(st.v[0] == doctest::Approx(0.05).epsilon(1e-15));
  // mhat = 1, vhat = 1 -> theta' = 1 - 0.1/(1 + 1e-8).
  CHECK(theta == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(theta == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adamw zero gradient leaves the parameter alone") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  double theta = 3.7, g = 0.0;
  AdamWState<double> st;
  adamw_step(&theta, &g, 1, st, cfg, 0.1);
  CHECK(theta == 3.7);
}

TEST_CASE("adamw decoupled decay acts alone when gradients vanish") {
  OptimizerConfig cfg;  // wd = 0.01
  double theta = 2.0, g = 0.0;
  AdamWState<double> st;
  adamw_step(&theta, &g, 1, st, cfg, 0.1);
  CHECK(theta == 2.0 * (1.0 - 0.1 * 0.01));
}

TEST_CASE("adamw ten-step trace agrees with an independent oracle") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.01;
  double theta = 0.5;
  AdamWState<double> st;

  double ref = 0.5, m = 0.0, v = 0.0;
  Rng rng(99);
  for (int t = 1; t <= 10; ++t) {
    double g = rng.next_normal();
    adamw_step(&theta, &g, 1, st, cfg, 0.05);
    m = 0.9 * m + 0.1 * g;
    v = 0.95 * v + 0.05 * g * g;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.95, t));
    ref -= 0.05 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * ref);
    CHECK(theta == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("adamw rejects non-finite gradients and size mismatches") {
  OptimizerConfig cfg;
  double theta = 1.0;
  double g = std::numeric_limits<double>::quiet_NaN();
  AdamWState<double> st;
  CHECK_THROWS_AS(adamw_step(&theta, &g, 1, st, cfg, 0.1),
                  std::runtime_error);
  double pair[2] = {1.0, 2.0};
  double gp[2] = {0.1, 0.1};
  AdamWState<double> st2;
  adamw_step(pair, gp, 2, st2, cfg, 0.1);
  CHECK_THROWS_AS(adamw_step(pair, gp, 1, st2, cfg, 0.1),
                  std::invalid_argument);
}

TEST_CASE("lion update direction is a sign") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  // g > 0 with zero momentum: u = +1, parameter drops by exactly lr.
  double theta = 1.0, g = 2.5;
  LionState<double> st;
  lion_step(&theta, &g, 1, st, cfg, 0.01);
  CHECK(theta == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(st.c[0] == doctest::Approx(0.025).epsilon(1e-15));

  // Mixed-sign vector: every step is lr times +-1 or 0.
  std::vector<double> p = {1.0, 1.0, 1.0};
  std::vector<double> grads = {-3.0, 0.0, 7.0};
  LionState<double> st3;
  lion_step(p.data(), grads.data(), 3, st3, cfg, 0.01);
  CHECK(p[0] == doctest::Approx(1.01).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p[2] == doctest::Approx(0.99).epsilon(1e-15));
}

TEST_CASE("lion ten-step trace agrees with an independent oracle") {
  OptimizerConfig cfg;  // wd = 0.01
  double theta = -0.2;
  LionState<double> st;
  double ref = -0.2, c = 0.0;
  Rng rng(123);
  for (int t = 0; t < 10; ++t) {
    double g = rng.next_normal();
    lion_step(&theta, &g, 1, st, cfg, 0.004);
    double blend = 0.9 * c + 0.1 * g;
    double u = blend > 0 ? 1.0 : (blend < 0 ? -1.0 : 0.0);
    c = 0.99 * c + 0.01 * g;
    ref -= 0.004 * (u + 0.01 * ref);
    CHECK(theta == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("newton-schulz maps singular values through the scalar quintic") {
  Rng rng(7);
  int shapes[][2] = {{8, 8},   {16, 8},  {8, 16},  {32, 32}, {64, 64},
                     {64, 16}, {16, 64}, {24, 24}, {48, 12}, {12, 48}};
  for (int trial = 0; trial < 100; ++trial) {
    auto& sh = shapes[trial % 10];
    double cond = 1.0 + 99.0 * rng.next_uniform();  // condition <= 100
    SvdTriple t = conditioned_triple(rng, sh[0], sh[1], cond);
    Matrix o = newton_schulz_orthogonalize(t.m, 5);
    REQUIRE(o.rows == sh[0]);
    REQUIRE(o.cols == sh[1]);
    int k = std::min(sh[0], sh[1]);
    double fn = frob(t.m);
    Matrix want(sh[0], sh[1]);
    for (int s = 0; s < k; ++s) {
      double mapped = ns_scalar(t.sv[s] / fn, 5);
      // One iteration maps [0, 1] into [0, g(0.5545..)] = [0, 1.2025) and
      // that interval is invariant under further iterations.
      CHECK(mapped <= 1.2025);
      CHECK(mapped >= 0.0);
      for (int i = 0; i < sh[0]; ++i)
        for (int j = 0; j < sh[1]; ++j)
          want.at(i, j) += t.u.at(i, s) * mapped * t.v.at(j, s);
    }
    double dist = 0.0;
    for (size_t i = 0; i < o.size(); ++i) {
      double d = o.d[i] - want.d[i];
      dist += d * d;
    }
    CHECK(std::sqrt(dist) < 1e-8);
  }
}

TEST_CASE("newton-schulz scales an orthogonal input by a known factor") {
  // After the Frobenius rescale an orthogonal n x n input has every singular
  // value at 1/sqrt(n), so the output is the input times one scalar.
  Rng rng(11);
  for (int n : {4, 16, 64}) {
    Matrix q = reduced_qr(random_matrix(rng, n, n)).q;
    Matrix o = newton_schulz_orthogonalize(q, 5);
    double mu = ns_scalar(1.0 / frob(q), 5);
    CHECK(mu >= 0.65);
    CHECK(mu <= 1.2025);
    double dist = 0.0;
    for (size_t i = 0; i < o.size(); ++i) {
      double d = o.d[i] - mu * q.d[i];
      dist += d * d;
    }
    CHECK(std::sqrt(dist) < 1e-8);
  }
}

TEST_CASE("newton-schulz flattens diag(2, 0.5) toward the identity") {
  Matrix m(2, 2);
  m.at(0, 0) = 2.0;
  m.at(1, 1) = 0.5;
  Matrix o = newton_schulz_orthogonalize(m, 5);
  CHECK(std::abs(o.at(0, 0) - 1.0) < 0.3);
  CHECK(std::abs(o.at(1, 1) - 1.0) < 0.3);
  CHECK(std::abs(o.at(0, 1)) < 0.3);
  CHECK(std::abs(o.at(1, 0)) < 0.3);
}

TEST_CASE("newton-schulz 16x8 orthogonality residual") {
  Rng rng(13);
  Matrix m = random_matrix(rng, 16, 8);
  Matrix o = newton_schulz_orthogonalize(m, 5);
  // O^T O - I = V diag(p(s)^2 - 1) V^T, so the residual is bounded by the
  // worst mapped singular value's distance from 1.
  auto sv_in = singular_values(m);
  double fn = frob(m);
  double worst = 0.0;
  for (double s : sv_in) {
    double p = ns_scalar(s / fn, 5);
    worst = std::max(worst, std::abs(p * p - 1.0));
  }
  CHECK(worst < 0.6);  // gaussian 16x8 keeps every s/fn above ~0.09
  Matrix gram = matmul(transpose(o), o);
  Matrix eye = identity(8);
  double resid = 0.0;
  for (size_t i = 0; i < gram.size(); ++i) {
    double d = gram.d[i] - eye.d[i];
    resid += d * d;
  }
  CHECK(std::sqrt(resid) <= std::sqrt(8.0) * worst + 1e-8);
}

TEST_CASE("newton-schulz degenerate and transpose behavior") {
  Matrix z(6, 3);
  Matrix o = newton_schulz_orthogonalize(z, 5);
  for (double v : o.d) CHECK(v == 0.0);

  // Tall inputs are handled by transposition, exactly.
  Rng rng(17);
  Matrix tall = random_matrix(rng, 24, 6);
  Matrix a = newton_schulz_orthogonalize(tall, 5);
  Matrix b = newton_schulz_orthogonalize(transpose(tall), 5);
  CHECK(max_abs_diff(a, transpose(b)) == 0.0);

  // A power-of-two rescale is absorbed bitwise by the Frobenius prescale.
  Matrix scaled = tall;
  for (double& v : scaled.d) v *= 4.0;
  Matrix c = newton_schulz_orthogonalize(scaled, 5);
  CHECK(max_abs_diff(a, c) == 0.0);
}

TEST_CASE("muon with zero momentum reproduces the orthogonalized gradient") {
  OptimizerConfig cfg = matrix_cfg(Kind::Muon);
  cfg.momentum = 0.0;
  Rng rng(19);
  int n = 12;
  Matrix g = reduced_qr(random_matrix(rng, n, n)).q;  // orthogonal gradient
  std::vector<double> param(n * n, 0.0);
  MatrixState st = make_matrix_state(n, n, cfg, 0);
  muon_step(param.data(), g.d.data(), n, n, st, cfg, cfg.lr);
  // Square shape: s = 1; wd = 0, and NS scales an orthogonal input by the
  // iterated quintic of 1/frob, so param = -lr * mu * g.
  double mu = ns_scalar(1.0 / frob(g), 5);
  double dist = 0.0;
  for (int i = 0; i < n * n; ++i) {
    double d = param[i] + cfg.lr * mu * g.d[i];
    dist += d * d;
  }
  CHECK(std::sqrt(dist) < cfg.lr * 1e-8);
}

TEST_CASE("muon update equals lr times the newton-schulz direction") {
  OptimizerConfig cfg = matrix_cfg(Kind::Muon);
  Rng rng(23);
  int rows = 6, cols = 12;  // wide: d_out < d_in, s = 1
  Matrix g = random_matrix(rng, rows, cols);
  std::vector<double> param(rows * cols, 0.0);
  MatrixState st = make_matrix_state(rows, cols, cfg, 0);
  muon_step(param.data(), g.d.data(), rows, cols, st, cfg, cfg.lr);
  Matrix o = newton_schulz_orthogonalize(st.momentum, cfg.ns_iterations);
  for (int i = 0; i < rows * cols; ++i)
    CHECK(param[i] == doctest::Approx(-cfg.lr * o.d[i]).epsilon(1e-14));

  // Tall shape scales by sqrt(rows/cols).
  int tr = 18, tc = 6;
  Matrix tg = random_matrix(rng, tr, tc);
  std::vector<double> tp(tr * tc, 0.0);
  MatrixState st2 = make_matrix_state(tr, tc, cfg, 1);
  muon_step(tp.data(), tg.d.data(), tr, tc, st2, cfg, cfg.lr);
  Matrix to = newton_schulz_orthogonalize(st2.momentum, cfg.ns_iterations);
  double s = std::sqrt(3.0);
  for (int i = 0; i < tr * tc; ++i)
    CHECK(tp[i] == doctest::Approx(-cfg.lr * s * to.d[i]).epsilon(1e-12));
}

TEST_CASE("muon momentum buffer accumulates across steps") {
  OptimizerConfig cfg = matrix_cfg(Kind::Muon);  // momentum 0.95
  Rng rng(29);
  int n = 8;
  std::vector<double> param(n * n, 0.0);
  MatrixState st = make_matrix_state(n, n, cfg, 0);
  Matrix g1 = random_matrix(rng, n, n);
  Matrix g2 = random_matrix(rng, n, n);
  muon_step(param.data(), g1.d.data(), n, n, st, cfg, cfg.lr);
  muon_step(param.data(), g2.d.data(), n, n, st, cfg, cfg.lr);
  for (int i = 0; i < n * n; ++i)
    CHECK(st.momentum.d[i] ==
          doctest::Approx(0.95 * g1.d[i] + g2.d[i]).epsilon(1e-14));
}

TEST_CASE("muon update direction has near-unit singular values") {
  OptimizerConfig cfg = matrix_cfg(Kind::Muon);
  Rng rng(31);
  SvdTriple t = conditioned_triple(rng, 16, 16, 50.0);
  std::vector<double> param(16 * 16, 0.0);
  MatrixState st = make_matrix_state(16, 16, cfg, 0);
  muon_step(param.data(), t.m.d.data(), 16, 16, st, cfg, cfg.lr);
  Matrix upd(16, 16);
  for (int i = 0; i < 16 * 16; ++i) upd.d[i] = -param[i] / cfg.lr;
  auto sv = singular_values(upd);
  double fn = frob(t.m);
  // The quintic is not monotone, so mapped values must be re-sorted before
  // they can be compared slot-by-slot with the measured spectrum.
  std::vector<double> mapped;
  for (double s : t.sv) mapped.push_back(ns_scalar(s / fn, 5));
  std::sort(mapped.rbegin(), mapped.rend());
  for (int i = 0; i < 16; ++i) {
    // Condition 50 keeps every mapped singular value inside [0.6, 1.2025].
    CHECK(sv[i] == doctest::Approx(mapped[i]).epsilon(1e-6));
    CHECK(sv[i] >= 0.6);
    CHECK(sv[i] <= 1.2025);
  }
}

TEST_CASE("normuon equals muon when rows are exchangeable") {
  // A scaled identity keeps every row of the orthogonalized direction at
  // exactly the same norm through every step, so the per-row scales cancel
  // against the global renormalization.
  for (Kind kind : {Kind::Muon, Kind::NorMuon}) (void)kind;
  OptimizerConfig mu_cfg = matrix_cfg(Kind::Muon);
  OptimizerConfig no_cfg = matrix_cfg(Kind::NorMuon);
  int n = 8;
  Matrix g(n, n);
  for (int i = 0; i < n; ++i) g.at(i, i) = 0.3;
  std::vector<double> pm(n * n, 0.0), pn(n * n, 0.0);
  MatrixState sm = make_matrix_state(n, n, mu_cfg, 0);
  MatrixState sn = make_matrix_state(n, n, no_cfg, 0);
  for (int step = 0; step < 5; ++step) {
    muon_step(pm.data(), g.d.data(), n, n, sm, mu_cfg, mu_cfg.lr);
    normuon_step(pn.data(), g.d.data(), n, n, sn, no_cfg, no_cfg.lr);
    for (int i = 0; i < n * n; ++i)
      CHECK(pm[i] == doctest::Approx(pn[i]).epsilon(1e-10));
  }

  // Distinct row norms must separate the two optimizers.
  Matrix gd(n, n);
  for (int i = 0; i < n; ++i) gd.at(i, i) = i % 2 == 0 ? 1.0 : 0.05;
  std::vector<double> qm(n * n, 0.0), qn(n * n, 0.0);
  MatrixState tm = make_matrix_state(n, n, mu_cfg, 1);
  MatrixState tn = make_matrix_state(n, n, no_cfg, 1);
  muon_step(qm.data(), gd.d.data(), n, n, tm, mu_cfg, mu_cfg.lr);
  normuon_step(qn.data(), gd.d.data(), n, n, tn, no_cfg, no_cfg.lr);
  double diff = 0.0;
  for (int i = 0; i < n * n; ++i) diff += std::abs(qm[i] - qn[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("normuon preserves the frobenius norm of the direction") {
  OptimizerConfig cfg = matrix_cfg(Kind::NorMuon);
  Rng rng(37);
  int rows = 10, cols = 6;
  Matrix g = random_matrix(rng, rows, cols);
  std::vector<double> param(rows * cols, 0.0);
  MatrixState st = make_matrix_state(rows, cols, cfg, 0);
  normuon_step(param.data(), g.d.data(), rows, cols, st, cfg, cfg.lr);
  // wd = 0: param = -lr*s*O', so ||O'||_F = ||param||_F / (lr*s).
  double s = std::sqrt(10.0 / 6.0);
  double got = 0.0;
  for (double p : param) got += p * p;
  got = std::sqrt(got) / (cfg.lr * s);
  Matrix o = newton_schulz_orthogonalize(st.momentum, cfg.ns_iterations);
  CHECK(got == doctest::Approx(frob(o)).epsilon(1e-10));
}

TEST_CASE("normuon two-row update matches a longhand trace") {
  OptimizerConfig cfg = matrix_cfg(Kind::NorMuon);
  int rows = 2, cols = 3;
  Matrix g(rows, cols);
  g.at(0, 0) = 0.8;
  g.at(0, 2) = -0.4;
  g.at(1, 1) = 0.1;
  std::vector<double> param = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  MatrixState st = make_matrix_state(rows, cols, cfg, 0);

  // Longhand: O = NS(g); per-row second moment with bias correction at t=1;
  // rescale rows; restore Frobenius norm; apply -lr*s*O'.
  Matrix o = newton_schulz_orthogonalize(g, cfg.ns_iterations);
  double before = frob(o);
  Matrix op = o;
  for (int i = 0; i < rows; ++i) {
    double ms = 0.0;
    for (int j = 0; j < cols; ++j) ms += o.at(i, j) * o.at(i, j);
    ms /= cols;
    double v = (1.0 - 0.95) * ms;
    double vhat = v / (1.0 - 0.95);
    double scale = 1.0 / (std::sqrt(vhat) + cfg.epsilon);
    for (int j = 0; j < cols; ++j) op.at(i, j) = o.at(i, j) * scale;
  }
  double after = frob(op);
  for (double& v : op.d) v *= before / after;
  std::vector<double> want = param;
  double s = 1.0;  // rows < cols
  for (int i = 0; i < rows * cols; ++i) want[i] -= cfg.lr * s * op.d[i];

  normuon_step(param.data(), g.d.data(), rows, cols, st, cfg, cfg.lr);
  for (int i = 0; i < rows * cols; ++i)
    CHECK(param[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("dion keeps the update rank bounded through a toy run") {
  Rng rng(41);
  int n = 16;
  Matrix x = random_matrix(rng, n, n);
  Matrix wstar = random_matrix(rng, n, n, 0.3);
  Matrix y = matmul(wstar, x);

  for (double r : {0.5, 0.25, 0.125, 0.0625}) {
    OptimizerConfig cfg = matrix_cfg(Kind::Dion);
    cfg.dion_rank_fraction = r;
    int k = static_cast<int>(std::ceil(r * n));
    std::vector<double> w(n * n, 0.0);
    MatrixState st = make_matrix_state(n, n, cfg, 7);
    REQUIRE(st.q.rows == n);
    REQUIRE(st.q.cols == k);

    for (int step = 0; step < 100; ++step) {
      // grad of ||W x - y||_F^2.
      Matrix wm(n, n);
      std::copy(w.begin(), w.end(), wm.d.begin());
      Matrix resid = matmul(wm, x);
      for (size_t i = 0; i < resid.size(); ++i) resid.d[i] -= y.d[i];
      Matrix grad = matmul(resid, transpose(x));
      for (double& v : grad.d) v *= 2.0;

      std::vector<double> prev = w;
      dion_step(w.data(), grad.d.data(), n, n, st, cfg, cfg.lr);

      // Update rank never exceeds k. The symmetric-embedding oracle resolves
      // singular values down to eps * sigma_max, which the 1e-10 cut needs.
      Matrix dw(n, n);
      for (int i = 0; i < n * n; ++i) dw.d[i] = w[i] - prev[i];
      auto sv = jw_singular_values(dw);
      for (int i = k; i < n; ++i) CHECK(sv[i] <= 1e-10 * sv[0]);

      // Right factor columns stay unit length.
      for (int j = 0; j < k; ++j) {
        double len = 0.0;
        for (int i = 0; i < n; ++i) len += st.q.at(i, j) * st.q.at(i, j);
        CHECK(std::sqrt(len) == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("dion at full rank converges to an orthogonal update direction") {
  // mu = 0 and a fixed gradient make successive steps a power iteration on
  // the same matrix, so Q converges to the right singular basis.
  OptimizerConfig cfg = matrix_cfg(Kind::Dion);
  cfg.momentum = 0.0;
  cfg.dion_rank_fraction = 1.0;
  Rng rng(43);
  int n = 8;
  Matrix g = conditioned_matrix(rng, n, n, 20.0);  // well-separated spectrum
  std::vector<double> w(n * n, 0.0);
  MatrixState st = make_matrix_state(n, n, cfg, 3);

  std::vector<double> prev;
  for (int step = 0; step < 60; ++step) {
    prev = w;
    dion_step(w.data(), g.d.data(), n, n, st, cfg, cfg.lr);
  }
  Matrix dw(n, n);
  for (int i = 0; i < n * n; ++i) dw.d[i] = (prev[i] - w[i]) / cfg.lr;
  auto sv = singular_values(dw);  // s = 1 on a square matrix
  for (double v : sv) {
    CHECK(v >= 0.5);
    CHECK(v <= 1.0 + 1e-12);
  }
}

TEST_CASE("dion state must be initialized and deterministic") {
  OptimizerConfig cfg = matrix_cfg(Kind::Dion);
  MatrixState empty;
  std::vector<double> w(12, 0.0);
  Matrix g(3, 4);
  g.at(1, 2) = 1.0;
  CHECK_THROWS_AS(dion_step(w.data(), g.d.data(), 3, 4, empty, cfg, 0.01),
                  std::invalid_argument);

  MatrixState a = make_matrix_state(3, 4, cfg, 5);
  MatrixState b = make_matrix_state(3, 4, cfg, 5);
  MatrixState c = make_matrix_state(3, 4, cfg, 6);
  CHECK(max_abs_diff(a.q, b.q) == 0.0);
  CHECK(max_abs_diff(a.q, c.q) > 0.0);

  // Orthonormal warm start.
  Matrix gram = matmul(transpose(a.q), a.q);
  CHECK(max_abs_diff(gram, identity(gram.rows)) < 1e-12);
}

TEST_CASE("matrix steps reject non-finite gradients") {
  std::vector<double> w(16, 0.0);
  Matrix g(4, 4);
  g.at(0, 0) = std::numeric_limits<double>::infinity();
  for (Kind kind : {Kind::Muon, Kind::NorMuon, Kind::Dion}) {
    OptimizerConfig cfg = matrix_cfg(kind);
    MatrixState st = make_matrix_state(4, 4, cfg, 0);
    auto call = [&] {
      if (kind == Kind::Muon)
        muon_step(w.data(), g.d.data(), 4, 4, st, cfg, 0.01);
      else if (kind == Kind::NorMuon)
        normuon_step(w.data(), g.d.data(), 4, 4, st, cfg, 0.01);
      else
        dion_step(w.data(), g.d.data(), 4, 4, st, cfg, 0.01);
    };
    CHECK_THROWS_AS(call(), std::runtime_error);
  }
}

TEST_CASE("learning-rate schedule holds then decays linearly") {
  CHECK(lr_schedule(0, 2000, 1.0) == 1.0);
  CHECK(lr_schedule(1600, 2000, 1.0) == 1.0);  // exactly 80%
  CHECK(lr_schedule(1601, 2000, 1.0) < 1.0);
  CHECK(lr_schedule(1800, 2000, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(lr_schedule(2000, 2000, 1.0) == 0.0);
  CHECK(lr_schedule(1900, 2000, 0.02) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK_THROWS_AS(lr_schedule(2001, 2000, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(lr_schedule(-1, 2000, 1.0), std::invalid_argument);
  // Degenerate zero-length run still answers for step 0.
  CHECK(lr_schedule(0, 0, 1.0) == 1.0);
}

TEST_CASE("routing sends matrices to the matrix path and the rest to lion") {
  speclab::model::ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.vocab_size = 11;
  mc.seq_len = 8;
  speclab::model::Model<float> m(mc);
  auto views = m.param_views();

  OptimizerConfig adamw;
  for (Route r : route_parameters(views, adamw)) CHECK(r == Route::AdamW);

  OptimizerConfig muon = matrix_cfg(Kind::Muon);
  auto routes = route_parameters(views, muon);
  for (size_t i = 0; i < views.size(); ++i) {
    if (views[i].matrix_class)
      CHECK(routes[i] == Route::Matrix);
    else
      CHECK(routes[i] == Route::Lion);
  }
  // Spot checks: embedding -> Lion, FFN input projection -> Matrix.
  CHECK(views[0].name == "embedding");
  CHECK(routes[0] == Route::Lion);
  CHECK(views[6].name == "layer0.w_in");
  CHECK(routes[6] == Route::Matrix);
  CHECK(routes.back() == Route::Lion);  // lm_head

  // Zero-layer model has only scalar-path parameters.
  speclab::model::ModelConfig zc = mc;
  zc.n_layers = 0;
  speclab::model::Model<float> zm(zc);
  auto zroutes = route_parameters(zm.param_views(), muon);
  REQUIRE(zroutes.size() == 3);
  for (Route r : zroutes) CHECK(r == Route::Lion);
}

TEST_CASE("every optimizer reduces a convex quadratic within 50 steps") {
  // loss = ||W X - Y||_F^2 with W starting at zero.
  Rng rng(53);
  int rows = 8, cols = 4, batch = 8;
  Matrix x = random_matrix(rng, cols, batch);
  Matrix wstar = random_matrix(rng, rows, cols, 0.25);
  Matrix y = matmul(wstar, x);

  auto loss_of = [&](const std::vector<double>& w) {
    Matrix wm(rows, cols);
    std::copy(w.begin(), w.end(), wm.d.begin());
    Matrix r = matmul(wm, x);
    double s = 0.0;
    for (size_t i = 0; i < r.size(); ++i) {
      double d = r.d[i] - y.d[i];
      s += d * d;
    }
    return s;
  };
  auto grad_of = [&](const std::vector<double>& w) {
    Matrix wm(rows, cols);
    std::copy(w.begin(), w.end(), wm.d.begin());
    Matrix r = matmul(wm, x);
    for (size_t i = 0; i < r.size(); ++i) r.d[i] -= y.d[i];
    Matrix g = matmul(r, transpose(x));
    for (double& v : g.d) v *= 2.0;
    return g;
  };

  for (Kind kind : {Kind::AdamW, Kind::Muon, Kind::NorMuon, Kind::Dion}) {
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.lr = kind == Kind::AdamW ? 3e-3 : 2e-2;  // per-family defaults
    std::vector<double> w(rows * cols, 0.0);
    double first = loss_of(w);
    AdamWState<double> ast;
    MatrixState mst = make_matrix_state(rows, cols, cfg, 0);
    for (int step = 0; step < 50; ++step) {
      Matrix g = grad_of(w);
      switch (kind) {
        case Kind::AdamW:
          adamw_step(w.data(), g.d.data(), w.size(), ast, cfg, cfg.lr);
          break;
        case Kind::Muon:
          muon_step(w.data(), g.d.data(), rows, cols, mst, cfg, cfg.lr);
          break;
        case Kind::NorMuon:
          normuon_step(w.data(), g.d.data(), rows, cols, mst, cfg, cfg.lr);
          break;
        case Kind::Dion:
          dion_step(w.data(), g.d.data(), rows, cols, mst, cfg, cfg.lr);
          break;
      }
    }
    double last = loss_of(w);
    CHECK(last < first);
    CHECK(last < 0.9 * first);
  }

  // The Lion scalar path participates in the same guarantee.
  OptimizerConfig lion_cfg;
  lion_cfg.scalar_lr = 1e-3;
  std::vector<double> w(rows * cols, 0.0);
  double first = loss_of(w);
  LionState<double> lst;
  for (int step = 0; step < 50; ++step) {
    Matrix g = grad_of(w);
    lion_step(w.data(), g.d.data(), w.size(), lst, lion_cfg,
              lion_cfg.scalar_lr);
  }
  CHECK(loss_of(w) < first);
}

TEST_CASE("optimizer bundle trains a model under every kind") {
  speclab::model::ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.vocab_size = 16;
  mc.seq_len = 8;
  mc.seed = 5;
  Rng rng(61);
  std::vector<int32_t> toks(16), tgts(16);
  for (int i = 0; i < 16; ++i) {
    toks[i] = static_cast<int32_t>(rng.next_below(16));
    tgts[i] = static_cast<int32_t>(rng.next_below(16));
  }

  for (Kind kind : {Kind::AdamW, Kind::Muon, Kind::NorMuon, Kind::Dion}) {
    speclab::model::Model<float> m(mc);
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.lr = kind == Kind::AdamW ? 3e-3 : 2e-2;
    cfg.scalar_lr = 1e-3;
    cfg.dion_rank_fraction = 0.5;
    cfg.seed = 9;
    Optimizer opt(cfg, m.param_views());

    double first = 0.0, last = 0.0;
    for (int step = 0; step < 30; ++step) {
      m.zero_grads();
      double loss = m.loss_and_grads(toks.data(), tgts.data(), 2, 8);
      if (step == 0) first = loss;
      last = loss;
      opt.step(m.param_views(), m.grad_views(), cfg.lr);
    }
    INFO("kind ", static_cast<int>(kind), " first ", first, " last ", last);
    CHECK(last < first);
  }
}

TEST_CASE("optimizer bundle is deterministic across instances") {
  speclab::model::ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.vocab_size = 16;
  mc.seq_len = 8;
  mc.seed = 5;
  std::vector<int32_t> toks = {1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int32_t> tgts = {2, 3, 4, 5, 6, 7, 8, 9};

  auto run = [&] {
    speclab::model::Model<float> m(mc);
    OptimizerConfig cfg;
    cfg.kind = Kind::Dion;
    cfg.lr = 2e-2;
    cfg.dion_rank_fraction = 0.25;
    cfg.seed = 3;
    Optimizer opt(cfg, m.param_views());
    std::vector<double> losses;
    for (int step = 0; step < 10; ++step) {
      m.zero_grads();
      losses.push_back(m.loss_and_grads(toks.data(), tgts.data(), 1, 8));
      opt.step(m.param_views(), m.grad_views(), lr_schedule(step, 10, cfg.lr));
    }
    return losses;
  };
  auto a = run();
  auto b = run();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
