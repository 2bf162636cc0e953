// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/fit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace speclab::fit {

ScalingFit fit_power_law(const std::vector<double>& widths,
                         const std::vector<double>& ranks) {
  const size_t n = widths.size();
  if (n != ranks.size())
    throw std::invalid_argument("fit_power_law: widths and ranks differ in length");
  if (n < 2) throw std::invalid_argument("fit_power_law: need at least 2 points");

  std::vector<double> x(n), y(n);
  for (size_t i = 0; i < n; ++i) {
    if (!(widths[i] > 0.0) || !(ranks[i] > 0.0))
      throw std::invalid_argument("fit_power_law: widths and ranks must be positive");
    x[i] = std::log(widths[i]);
    y[i] = std::log(ranks[i]);
  }
  std::set<double> distinct(widths.begin(), widths.end());
  if (distinct.size() != n)
    throw std::invalid_argument("fit_power_law: duplicate widths make the fit degenerate");

  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }

  ScalingFit out;
  out.n_points = static_cast<int>(n);
  out.beta = sxy / sxx;
  out.intercept = my - out.beta * mx;

  double ss_res = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double r = y[i] - (out.beta * x[i] + out.intercept);
    ss_res += r * r;
  }
  if (syy <= 0.0) {
    out.r2 = 1.0;  // constant response fitted exactly by the flat line
  } else {
    out.r2 = 1.0 - ss_res / syy;
    out.r2 = std::min(1.0, std::max(0.0, out.r2));
  }
  out.stderr_beta = (n > 2) ? std::sqrt(ss_res / (static_cast<double>(n) - 2.0) / sxx) : 0.0;
  return out;
}

double exponent_asymmetry(double beta_soft, double beta_hard) {
  return beta_soft - beta_hard;
}

namespace {

// Linear-interpolation quantile on sorted data, q in [0, 1].
double quantile_sorted(const std::vector<double>& v, double q) {
  const size_t n = v.size();
  if (n == 1) return v[0];
  double pos = q * static_cast<double>(n - 1);
  size_t lo = static_cast<size_t>(pos);
  if (lo >= n - 1) return v[n - 1];
  double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace

LayerwiseSummary layerwise_summary(std::vector<double> values) {
  if (values.empty())
    throw std::invalid_argument("layerwise_summary: no values");
  LayerwiseSummary out;
  out.n = static_cast<int>(values.size());
  int positive = 0;
  for (double v : values)
    if (v > 0.0) ++positive;
  out.frac_positive = static_cast<double>(positive) / static_cast<double>(values.size());

  std::sort(values.begin(), values.end());
  size_t n = values.size();
  out.median = (n % 2 == 1) ? values[n / 2]
                            : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  out.iqr = quantile_sorted(values, 0.75) - quantile_sorted(values, 0.25);
  return out;
}

bool GridKey::operator<(const GridKey& o) const {
  if (optimizer != o.optimizer) return optimizer < o.optimizer;
  if (architecture != o.architecture) return architecture < o.architecture;
  if (regime != o.regime) return regime < o.regime;
  return metric < o.metric;
}

std::vector<EffectRow> effect_sizes(const BetaGrid& grid,
                                    const std::string& baseline_opt,
                                    const std::string& baseline_arch,
                                    const std::string& variant_arch) {
  // Collect the (regime, metric) slices and the optimizers present anywhere.
  std::set<std::pair<std::string, std::string>> slices;
  std::set<std::string> optimizers;
  for (const auto& [key, beta] : grid) {
    (void)beta;
    slices.insert({key.regime, key.metric});
    optimizers.insert(key.optimizer);
  }

  auto arch_effect = [&](const std::string& arch, const std::string& regime,
                         const std::string& metric) {
    ArchEffect eff;
    double base_beta = 0.0;
    bool has_base_beta = false;
    bool any = false;
    double best = 0.0;
    std::string best_opt;
    for (const std::string& opt : optimizers) {
      auto it = grid.find(GridKey{opt, arch, regime, metric});
      if (it == grid.end()) continue;
      if (!any || it->second > best) {
        best = it->second;
        best_opt = opt;
      }
      any = true;
      if (opt == baseline_opt) {
        base_beta = it->second;
        has_base_beta = true;
      }
    }
    if (!any) return eff;  // architecture absent for this slice
    if (!has_base_beta)
      throw std::runtime_error("effect_sizes: missing baseline cell (" + baseline_opt +
                               ", " + arch + ", " + regime + ", " + metric + ")");
    eff.present = true;
    eff.delta_opt_star = best - base_beta;
    eff.best_optimizer = best_opt;
    return eff;
  };

  std::vector<EffectRow> rows;
  for (const auto& [regime, metric] : slices) {
    EffectRow row;
    row.regime = regime;
    row.metric = metric;
    row.base = arch_effect(baseline_arch, regime, metric);
    row.variant = arch_effect(variant_arch, regime, metric);
    if (row.base.present && row.variant.present) {
      row.has_interaction = true;
      row.interaction = row.variant.delta_opt_star - row.base.delta_opt_star;
    }
    for (const std::string& opt : optimizers) {
      OptimizerArchEffect oe;
      auto b = grid.find(GridKey{opt, baseline_arch, regime, metric});
      auto v = grid.find(GridKey{opt, variant_arch, regime, metric});
      if (b != grid.end() && v != grid.end()) {
        oe.present = true;
        oe.delta_arch = v->second - b->second;
        oe.a_rank = std::abs(oe.delta_arch);
      }
      row.per_optimizer[opt] = oe;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace speclab::fit
