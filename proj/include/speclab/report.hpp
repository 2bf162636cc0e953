// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Human-facing outputs derived from finished sweeps: summary CSV tables,
// eigenspectrum dumps, and the standalone width/rank fit.

#pragma once

#include <cstdint>
#include <string>

#include "speclab/fit.hpp"

namespace speclab::report {

// Writes <sweep_dir>/report/*.csv from the run records on disk:
//   runs.csv           one row per run; diverged runs carry the step and
//                      message of the failing update
//   beta_table.csv     soft and hard width-scaling exponents per
//                      (optimizer, architecture, regime); fits with
//                      R^2 < 0.3 are flagged "directional"
//   layerwise.csv      median / IQR / positive fraction of per-layer
//                      exponents
//   effects.csv        optimizer and architecture effect sizes
//   rank_vs_width.csv  final-checkpoint layer-mean ranks per width
//   trajectory.csv     hard-rank trajectories across checkpoints
// A sweep with no usable runs still writes every file, headers only.
void generate_report(const std::string& sweep_dir);

// Evaluates a checkpointed model over its corpus validation region and
// writes one text file per (layer, probe, regime) into out_dir, named
// spectrum_l<layer>_<probe>_<regime>.txt. Each file starts with the line
// "layer probe regime n D" and continues with one descending
// trace-normalized eigenvalue per line.
void dump_spectra(const std::string& checkpoint_path,
                  const std::string& corpus_path, const std::string& out_dir,
                  int64_t eval_tokens, double val_fraction);

// Reads a two-column width,rank CSV (one optional header line) and fits
// log rank against log width.
fit::ScalingFit fit_points_file(const std::string& csv_path);

}  // namespace speclab::report
