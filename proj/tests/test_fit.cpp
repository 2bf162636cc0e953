// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "speclab/fit.hpp"
#include "speclab/linalg.hpp"

using namespace speclab::fit;
using speclab::linalg::Rng;

TEST_CASE("power-law fit recovers exact synthetic exponents") {
  Rng r(21);
  for (int trial = 0; trial < 100; ++trial) {
    double beta = -1.0 + 2.0 * r.next_uniform();
    double logc = -2.0 + 4.0 * r.next_uniform();
    int n = 3 + static_cast<int>(r.next_below(8));
    std::vector<double> widths, ranks;
    double w = 16.0;
    for (int i = 0; i < n; ++i) {
      widths.push_back(w);
      ranks.push_back(std::exp(logc) * std::pow(w, beta));
      w *= 2.0;
    }
    ScalingFit f = fit_power_law(widths, ranks);
    CHECK(std::abs(f.beta - beta) <= 1e-9);
    CHECK(std::abs(f.intercept - logc) <= 1e-9);
    CHECK(f.r2 >= 1.0 - 1e-12);
    CHECK(f.r2 <= 1.0);
    CHECK(f.n_points == n);
    if (n > 2) CHECK(f.stderr_beta <= 1e-9);
  }
}

TEST_CASE("two-point fit is exact with zero slope stderr") {
  ScalingFit f = fit_power_law({64.0, 256.0}, {10.0, 40.0});
  CHECK(f.beta == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.r2 == doctest::Approx(1.0));
  CHECK(f.stderr_beta == 0.0);
  CHECK(f.n_points == 2);
}

TEST_CASE("noisy fit reports positive stderr and bounded r2") {
  Rng r(22);
  std::vector<double> widths, ranks;
  for (int i = 0; i < 8; ++i) {
    double w = 32.0 * std::pow(2.0, i);
    widths.push_back(w);
    ranks.push_back(2.0 * std::pow(w, 0.5) * std::exp(0.25 * r.next_normal()));
  }
  ScalingFit f = fit_power_law(widths, ranks);
  CHECK(f.stderr_beta > 0.0);
  CHECK(f.r2 >= 0.0);
  CHECK(f.r2 < 1.0);
  CHECK(f.beta == doctest::Approx(0.5).epsilon(0.5));
}

TEST_CASE("constant ranks fit as zero slope with r2 = 1") {
  ScalingFit f = fit_power_law({1.0, 2.0, 4.0, 8.0}, {3.0, 3.0, 3.0, 3.0});
  CHECK(f.beta == doctest::Approx(0.0));
  CHECK(f.r2 == doctest::Approx(1.0));
}

TEST_CASE("power-law fit input validation") {
  CHECK_THROWS_AS(fit_power_law({1.0, 2.0}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fit_power_law({1.0}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fit_power_law({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(fit_power_law({1.0, -2.0}, {1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fit_power_law({1.0, 2.0}, {0.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fit_power_law({2.0, 2.0}, {1.0, 3.0}), std::invalid_argument);
}

TEST_CASE("exponent asymmetry is the soft-hard difference") {
  CHECK(exponent_asymmetry(0.66, 0.29) == doctest::Approx(0.37).epsilon(1e-12));
  CHECK(exponent_asymmetry(0.2, 0.5) == doctest::Approx(-0.3).epsilon(1e-12));
}

namespace {

// Reference linear-interpolation quantile on a copy (sorts internally).
double ref_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  double pos = q * static_cast<double>(v.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace

TEST_CASE("layerwise summary: hand-computed quartiles") {
  LayerwiseSummary s = layerwise_summary({4.0, 1.0, 3.0, 2.0});
  CHECK(s.median == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(s.iqr == doctest::Approx(1.5).epsilon(1e-12));  // 3.25 - 1.75
  CHECK(s.n == 4);

  LayerwiseSummary odd = layerwise_summary({5.0, 1.0, 3.0});
  CHECK(odd.median == doctest::Approx(3.0).epsilon(1e-12));

  LayerwiseSummary one = layerwise_summary({7.0});
  CHECK(one.median == doctest::Approx(7.0));
  CHECK(one.iqr == doctest::Approx(0.0));
  CHECK(one.frac_positive == doctest::Approx(1.0));

  CHECK_THROWS(layerwise_summary({}));
}

TEST_CASE("layerwise summary: strictly positive fraction") {
  LayerwiseSummary s = layerwise_summary({-1.0, 0.0, 2.0, 3.0});
  CHECK(s.frac_positive == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("layerwise summary matches reference quantiles on random data") {
  Rng r(23);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 1 + static_cast<int>(r.next_below(30));
    std::vector<double> v(n);
    for (double& x : v) x = r.next_normal();
    LayerwiseSummary s = layerwise_summary(v);
    CHECK(s.median == doctest::Approx(ref_quantile(v, 0.5)).epsilon(1e-12));
    double want_iqr = ref_quantile(v, 0.75) - ref_quantile(v, 0.25);
    CHECK(s.iqr == doctest::Approx(want_iqr).epsilon(1e-12));
  }
}

namespace {

void put(BetaGrid& g, const std::string& opt, const std::string& arch,
         const std::string& regime, const std::string& metric, double beta) {
  g[GridKey{opt, arch, regime, metric}] = beta;
}

}  // namespace

TEST_CASE("effect sizes: optimizer gain, interaction, and per-optimizer shift") {
  BetaGrid g;
  // Baseline architecture: adamw 0.100, muon 0.430 -> gain 0.330.
  put(g, "adamw", "base", "tail", "hard", 0.100);
  put(g, "muon", "base", "tail", "hard", 0.430);
  // Variant architecture: adamw unchanged, muon 0.736 -> gain 0.636.
  put(g, "adamw", "novar", "tail", "hard", 0.100);
  put(g, "muon", "novar", "tail", "hard", 0.736);

  std::vector<EffectRow> rows = effect_sizes(g, "adamw", "base", "novar");
  REQUIRE(rows.size() == 1);
  const EffectRow& e = rows[0];
  CHECK(e.regime == "tail");
  CHECK(e.metric == "hard");
  REQUIRE(e.base.present);
  REQUIRE(e.variant.present);
  CHECK(e.base.delta_opt_star == doctest::Approx(0.330).epsilon(1e-12));
  CHECK(e.variant.delta_opt_star == doctest::Approx(0.636).epsilon(1e-12));
  CHECK(e.base.best_optimizer == "muon");
  REQUIRE(e.has_interaction);
  CHECK(e.interaction == doctest::Approx(0.306).epsilon(1e-12));

  REQUIRE(e.per_optimizer.count("muon") == 1);
  const OptimizerArchEffect& m = e.per_optimizer.at("muon");
  REQUIRE(m.present);
  CHECK(m.delta_arch == doctest::Approx(0.306).epsilon(1e-12));
  CHECK(m.a_rank == doctest::Approx(0.306).epsilon(1e-12));
  const OptimizerArchEffect& a = e.per_optimizer.at("adamw");
  CHECK(a.delta_arch == doctest::Approx(0.0));
}

TEST_CASE("effect sizes: baseline-best slice gives zero gain, not negative") {
  BetaGrid g;
  put(g, "adamw", "base", "agg", "soft", 0.500);
  put(g, "muon", "base", "agg", "soft", 0.200);
  std::vector<EffectRow> rows = effect_sizes(g, "adamw", "base", "novar");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].base.delta_opt_star == doctest::Approx(0.0));
  CHECK(rows[0].base.best_optimizer == "adamw");
  CHECK_FALSE(rows[0].variant.present);
  CHECK_FALSE(rows[0].has_interaction);
}

TEST_CASE("effect sizes: ties pick the alphabetically first optimizer") {
  BetaGrid g;
  put(g, "muon", "base", "agg", "soft", 0.400);
  put(g, "dion", "base", "agg", "soft", 0.400);
  put(g, "adamw", "base", "agg", "soft", 0.100);
  std::vector<EffectRow> rows = effect_sizes(g, "adamw", "base", "novar");
  CHECK(rows[0].base.best_optimizer == "dion");
  CHECK(rows[0].base.delta_opt_star == doctest::Approx(0.300).epsilon(1e-12));
}

TEST_CASE("effect sizes: missing baseline optimizer in a populated slice throws") {
  BetaGrid g;
  put(g, "muon", "base", "tail", "hard", 0.430);
  try {
    effect_sizes(g, "adamw", "base", "novar");
    FAIL("expected a missing-baseline error");
  } catch (const std::runtime_error& err) {
    std::string msg = err.what();
    CHECK(msg.find("adamw") != std::string::npos);
    CHECK(msg.find("base") != std::string::npos);
    CHECK(msg.find("tail") != std::string::npos);
    CHECK(msg.find("hard") != std::string::npos);
  }
}

TEST_CASE("effect sizes: rows are ordered by regime then metric") {
  BetaGrid g;
  for (const char* regime : {"head", "agg"})
    for (const char* metric : {"soft", "hard"}) {
      put(g, "adamw", "base", regime, metric, 0.1);
      put(g, "muon", "base", regime, metric, 0.2);
    }
  std::vector<EffectRow> rows = effect_sizes(g, "adamw", "base", "novar");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].regime == "agg");
  CHECK(rows[0].metric == "hard");
  CHECK(rows[1].metric == "soft");
  CHECK(rows[2].regime == "head");
  CHECK(rows[3].metric == "soft");
}

TEST_CASE("grid key ordering is lexicographic over all four fields") {
  GridKey a{"adamw", "base", "agg", "hard"};
  GridKey b{"adamw", "base", "agg", "soft"};
  GridKey c{"adamw", "base", "head", "hard"};
  GridKey d{"muon", "base", "agg", "hard"};
  CHECK(a < b);
  CHECK(b < c);
  CHECK(c < d);
  CHECK_FALSE(a < a);
}
