// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Report generation. All tables are rebuilt from run_record.json files so
// a report can be regenerated for any sweep directory at any time; cells
// that cannot be computed are written as NA rather than imputed.

#include "speclab/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <vector>

#include "speclab/data.hpp"
#include "speclab/experiment.hpp"
#include "speclab/model.hpp"
#include "speclab/spectral.hpp"

namespace speclab::report {

namespace fs = std::filesystem;
using experiment::ConfigError;
using experiment::format_double;
using experiment::IoError;
using experiment::kFitMetrics;
using experiment::kRegimes;
using experiment::RunRecord;
using experiment::RunSummary;

namespace {

constexpr const char* kNA = "NA";

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("short write to " + path);
}

double final_metric(const RunRecord& rec, const std::string& key, bool* ok) {
  *ok = false;
  if (rec.checkpoints.empty()) return 0.0;
  const auto& m = rec.checkpoints.back().metrics;
  auto it = m.find(key);
  if (it == m.end() || !std::isfinite(it->second)) return 0.0;
  *ok = true;
  return it->second;
}

using Group = std::pair<std::string, std::string>;  // optimizer, architecture

std::map<Group, std::vector<const RunRecord*>> complete_groups(
    const std::vector<RunSummary>& runs) {
  std::map<Group, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs)
    if (r.complete() && !r.record.checkpoints.empty())
      groups[{r.record.optimizer_label, r.record.architecture}].push_back(
          &r.record);
  for (auto& [g, recs] : groups)
    std::sort(recs.begin(), recs.end(),
              [](const RunRecord* a, const RunRecord* b) {
                return a->ffn_mult < b->ffn_mult;
              });
  return groups;
}

// Width/rank points for one metric key across a group's runs.
void collect_points(const std::vector<const RunRecord*>& recs,
                    const std::string& key, std::vector<double>* widths,
                    std::vector<double>* ranks) {
  widths->clear();
  ranks->clear();
  for (const RunRecord* rec : recs) {
    bool ok = false;
    const double v = final_metric(*rec, key, &ok);
    if (!ok || !(v > 0.0)) continue;
    const double d = static_cast<double>(rec->ffn_mult) * rec->d_model;
    if (!widths->empty() && widths->back() == d) continue;
    widths->push_back(d);
    ranks->push_back(v);
  }
}

std::string runs_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream csv;
  csv << "run,optimizer,architecture,ffn_mult,status,diverged_at,error,"
         "final_step,val_loss,ppl\n";
  for (const auto& r : runs) {
    const RunRecord& rec = r.record;
    csv << rec.id << "," << rec.optimizer_label << "," << rec.architecture
        << "," << rec.ffn_mult << "," << rec.status << ",";
    if (rec.status == "diverged") {
      std::string msg = rec.error;
      for (char& c : msg)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
      csv << rec.diverged_at << "," << msg << ",";
    } else {
      csv << kNA << "," << kNA << ",";
    }
    if (rec.checkpoints.empty()) {
      csv << kNA << "," << kNA << "," << kNA << "\n";
    } else {
      const auto& ck = rec.checkpoints.back();
      csv << ck.step << "," << format_double(ck.val_loss) << ","
          << format_double(ck.ppl) << "\n";
    }
  }
  return csv.str();
}

std::string beta_table_csv(const std::vector<experiment::FitRow>& rows) {
  // (optimizer, architecture, regime) -> fits by metric
  std::map<std::tuple<std::string, std::string, std::string>,
           std::map<std::string, fit::ScalingFit>>
      cells;
  for (const auto& r : rows)
    cells[{r.optimizer, r.architecture, r.regime}][r.metric] = r.fit;
  std::ostringstream csv;
  csv << "optimizer,architecture,regime,beta_soft,r2_soft,beta_hard,r2_hard,"
         "delta12,flag\n";
  for (const auto& [key, fits] : cells) {
    csv << std::get<0>(key) << "," << std::get<1>(key) << ","
        << std::get<2>(key) << ",";
    auto soft = fits.find("soft");
    auto hard = fits.find("hard");
    bool directional = false;
    if (soft != fits.end()) {
      csv << format_double(soft->second.beta) << ","
          << format_double(soft->second.r2) << ",";
      directional |= soft->second.r2 < 0.3;
    } else {
      csv << kNA << "," << kNA << ",";
    }
    if (hard != fits.end()) {
      csv << format_double(hard->second.beta) << ","
          << format_double(hard->second.r2) << ",";
      directional |= hard->second.r2 < 0.3;
    } else {
      csv << kNA << "," << kNA << ",";
    }
    if (soft != fits.end() && hard != fits.end())
      csv << format_double(
          fit::exponent_asymmetry(soft->second.beta, hard->second.beta));
    else
      csv << kNA;
    csv << "," << (directional ? "directional" : "") << "\n";
  }
  return csv.str();
}

std::string layerwise_csv(
    const std::map<Group, std::vector<const RunRecord*>>& groups) {
  std::ostringstream csv;
  csv << "optimizer,architecture,regime,metric,n_layers,median,iqr,"
         "frac_positive\n";
  for (const auto& [g, recs] : groups) {
    // Layer count: probe layer-indexed keys until one is missing.
    int n_layers = 0;
    if (!recs.empty()) {
      const auto& m = recs.front()->checkpoints.back().metrics;
      while (m.count(std::to_string(n_layers) + ".post.agg.n")) ++n_layers;
    }
    for (const char* regime : kRegimes) {
      for (const char* metric : kFitMetrics) {
        std::vector<double> betas;
        for (int l = 0; l < n_layers; ++l) {
          const std::string key =
              std::to_string(l) + ".post." + regime + "." + metric;
          std::vector<double> w, r;
          collect_points(recs, key, &w, &r);
          if (w.size() < 2) continue;
          betas.push_back(fit::fit_power_law(w, r).beta);
        }
        if (betas.empty()) continue;
        const fit::LayerwiseSummary s = fit::layerwise_summary(betas);
        csv << g.first << "," << g.second << "," << regime << "," << metric
            << "," << s.n << "," << format_double(s.median) << ","
            << format_double(s.iqr) << "," << format_double(s.frac_positive)
            << "\n";
      }
    }
  }
  return csv.str();
}

std::string effects_csv(const std::vector<experiment::FitRow>& rows) {
  std::ostringstream csv;
  csv << "regime,metric,base_arch,variant_arch,delta_opt_star_base,"
         "best_optimizer_base,delta_opt_star_variant,best_optimizer_variant,"
         "interaction,optimizer,delta_arch,a_rank\n";
  if (rows.empty()) return csv.str();

  fit::BetaGrid grid;
  std::set<std::string> opts, archs;
  for (const auto& r : rows) {
    grid[{r.optimizer, r.architecture, r.regime, r.metric}] = r.fit.beta;
    opts.insert(r.optimizer);
    archs.insert(r.architecture);
  }
  const std::string baseline_opt =
      opts.count("adamw") ? "adamw" : *opts.begin();
  auto it = archs.begin();
  const std::string base_arch = *it;
  const std::string variant_arch = archs.size() > 1 ? *std::next(it) : "none";

  std::vector<fit::EffectRow> effects;
  try {
    effects = fit::effect_sizes(grid, baseline_opt, base_arch, variant_arch);
  } catch (const std::exception&) {
    // Baseline optimizer missing from a populated slice: no effect table.
    return csv.str();
  }
  for (const auto& e : effects) {
    std::ostringstream shared;
    shared << e.regime << "," << e.metric << "," << base_arch << ","
           << variant_arch << ",";
    if (e.base.present)
      shared << format_double(e.base.delta_opt_star) << ","
             << e.base.best_optimizer << ",";
    else
      shared << kNA << "," << kNA << ",";
    if (e.variant.present)
      shared << format_double(e.variant.delta_opt_star) << ","
             << e.variant.best_optimizer << ",";
    else
      shared << kNA << "," << kNA << ",";
    if (e.has_interaction)
      shared << format_double(e.interaction);
    else
      shared << kNA;
    if (e.per_optimizer.empty()) {
      csv << shared.str() << "," << kNA << "," << kNA << "," << kNA << "\n";
      continue;
    }
    for (const auto& [opt, oe] : e.per_optimizer) {
      csv << shared.str() << "," << opt << ",";
      if (oe.present)
        csv << format_double(oe.delta_arch) << "," << format_double(oe.a_rank);
      else
        csv << kNA << "," << kNA;
      csv << "\n";
    }
  }
  return csv.str();
}

std::string rank_vs_width_csv(
    const std::map<Group, std::vector<const RunRecord*>>& groups) {
  std::ostringstream csv;
  csv << "optimizer,architecture,regime,metric,ffn_mult,width,rank\n";
  for (const auto& [g, recs] : groups) {
    for (const char* regime : kRegimes) {
      for (const char* metric : kFitMetrics) {
        const std::string key = std::string("mean.post.") + regime + "." + metric;
        for (const RunRecord* rec : recs) {
          bool ok = false;
          const double v = final_metric(*rec, key, &ok);
          if (!ok) continue;
          csv << g.first << "," << g.second << "," << regime << "," << metric
              << "," << rec->ffn_mult << "," << rec->ffn_mult * rec->d_model
              << "," << format_double(v) << "\n";
        }
      }
    }
  }
  return csv.str();
}

std::string trajectory_csv(
    const std::map<Group, std::vector<const RunRecord*>>& groups) {
  std::ostringstream csv;
  csv << "optimizer,architecture,ffn_mult,step,regime,hard\n";
  for (const auto& [g, recs] : groups) {
    for (const RunRecord* rec : recs) {
      for (const auto& ck : rec->checkpoints) {
        for (const char* regime : kRegimes) {
          auto it = ck.metrics.find(std::string("mean.post.") + regime + ".hard");
          if (it == ck.metrics.end()) continue;
          csv << g.first << "," << g.second << "," << rec->ffn_mult << ","
              << ck.step << "," << regime << "," << format_double(it->second)
              << "\n";
        }
      }
    }
  }
  return csv.str();
}

}  // namespace

void generate_report(const std::string& sweep_dir) {
  const std::vector<RunSummary> runs = experiment::load_sweep_runs(sweep_dir);
  const std::vector<experiment::FitRow> rows = experiment::fit_grid(runs);
  const auto groups = complete_groups(runs);

  const std::string dir = sweep_dir + "/report";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  write_text(dir + "/runs.csv", runs_csv(runs));
  write_text(dir + "/beta_table.csv", beta_table_csv(rows));
  write_text(dir + "/layerwise.csv", layerwise_csv(groups));
  write_text(dir + "/effects.csv", effects_csv(rows));
  write_text(dir + "/rank_vs_width.csv", rank_vs_width_csv(groups));
  write_text(dir + "/trajectory.csv", trajectory_csv(groups));
}

void dump_spectra(const std::string& checkpoint_path,
                  const std::string& corpus_path, const std::string& out_dir,
                  int64_t eval_tokens, double val_fraction) {
  if (!fs::exists(checkpoint_path))
    throw IoError("checkpoint not found: " + checkpoint_path);
  if (!fs::exists(corpus_path))
    throw IoError("corpus not found: " + corpus_path);
  model::Model<float> mdl = model::load_checkpoint<float>(checkpoint_path);
  const model::ModelConfig& mc = mdl.config();
  data::Corpus corpus;
  try {
    corpus = data::load_corpus(corpus_path, val_fraction);
  } catch (const std::exception& e) {
    throw IoError(std::string("corpus: ") + e.what());
  }
  const data::FrequencyTable table = data::build_frequency_table(
      corpus.bytes.data(), corpus.train_len, mc.vocab_size);
  const data::FrequencyStrata strata = data::stratify(table);

  model::ProbeCapture capture(mc.n_layers, mc.ffn_dim(), mc.seq_len, &strata);
  constexpr int kEvalBatch = 32;
  experiment::capture_eval(mdl, corpus, strata, kEvalBatch, eval_tokens,
                           &capture);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  constexpr const char* kProbes[2] = {"pre", "post"};
  for (int l = 0; l < mc.n_layers; ++l) {
    for (int p = 0; p < 2; ++p) {
      for (int s = 0; s < 4; ++s) {
        spectral::CovAccumulator merged;
        const spectral::CovAccumulator* acc;
        if (s < 3) {
          acc = &capture.cov(l, p, static_cast<data::Regime>(s));
        } else {
          merged = capture.cov_agg(l, p);
          acc = &merged;
        }
        if (acc->n < 2) continue;
        const spectral::EigenSpectrum spec = spectral::covariance_spectrum(*acc);
        std::ostringstream body;
        body << l << " " << kProbes[p] << " " << kRegimes[s] << " " << spec.n_samples
             << " " << spec.dim << "\n";
        if (!spec.degenerate)
          for (double v : spec.p) body << format_double(v) << "\n";
        write_text(out_dir + "/spectrum_l" + std::to_string(l) + "_" +
                       kProbes[p] + "_" + kRegimes[s] + ".txt",
                   body.str());
      }
    }
  }
}

fit::ScalingFit fit_points_file(const std::string& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw IoError("cannot read " + csv_path);
  std::vector<double> widths, ranks;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    for (char& c : line)
      if (c == ',' || c == '\t' || c == ';') c = ' ';
    std::istringstream ss(line);
    double w, r;
    if (ss >> w >> r) {
      widths.push_back(w);
      ranks.push_back(r);
    } else {
      const bool blank = line.find_first_not_of(" \r\n") == std::string::npos;
      // a blank line or one leading header line is fine; anything else isn't
      if (!blank && !first)
        throw ConfigError("fit: malformed line \"" + line + "\"");
    }
    first = false;
  }
  try {
    return fit::fit_power_law(widths, ranks);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("fit: ") + e.what());
  }
}

}  // namespace speclab::report
