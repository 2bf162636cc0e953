// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

namespace speclab::fit {

// Least-squares fit of log R = beta * log D + c.
struct ScalingFit {
  double beta = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double stderr_beta = 0.0;  // OLS slope standard error; 0 when n == 2
  int n_points = 0;
};

// widths and ranks must be positive, same length >= 2, widths distinct.
ScalingFit fit_power_law(const std::vector<double>& widths,
                         const std::vector<double>& ranks);

// beta_soft - beta_hard.
double exponent_asymmetry(double beta_soft, double beta_hard);

struct LayerwiseSummary {
  double median = 0.0;
  double iqr = 0.0;            // Q3 - Q1, linear-interpolation quantiles
  double frac_positive = 0.0;  // strictly positive share
  int n = 0;
};

LayerwiseSummary layerwise_summary(std::vector<double> values);

// ---- effect sizes over a (optimizer, architecture, regime, metric) grid ----

struct GridKey {
  std::string optimizer;
  std::string architecture;
  std::string regime;
  std::string metric;
  bool operator<(const GridKey& o) const;
};

using BetaGrid = std::map<GridKey, double>;

struct ArchEffect {
  bool present = false;
  double delta_opt_star = 0.0;  // max_o beta - beta_baseline_opt
  std::string best_optimizer;
};

struct OptimizerArchEffect {
  bool present = false;
  double delta_arch = 0.0;  // beta(variant) - beta(baseline), signed
  double a_rank = 0.0;      // |delta_arch|
};

struct EffectRow {
  std::string regime;
  std::string metric;
  ArchEffect base;     // baseline architecture
  ArchEffect variant;  // variant architecture
  bool has_interaction = false;
  double interaction = 0.0;  // delta_opt_star(variant) - delta_opt_star(base)
  std::map<std::string, OptimizerArchEffect> per_optimizer;
};

// baseline_opt must be present in every (architecture, regime, metric) slice
// that has any cells; a slice missing it throws, naming the absent cell.
// Missing architectures are reported absent, never imputed.
std::vector<EffectRow> effect_sizes(const BetaGrid& grid,
                                    const std::string& baseline_opt,
                                    const std::string& baseline_arch,
                                    const std::string& variant_arch);

}  // namespace speclab::fit
