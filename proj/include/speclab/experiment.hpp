// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Training-run orchestration: JSON experiment configs, single runs with
// checkpointed spectral metrics, Cartesian sweeps, and the width-scaling
// fit grid derived from completed runs.

#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "speclab/data.hpp"
#include "speclab/fit.hpp"
#include "speclab/model.hpp"
#include "speclab/optim.hpp"

namespace speclab::experiment {

inline constexpr int kSchemaVersion = 1;

// Config or CLI input that cannot be acted on. Maps to exit code 1.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Filesystem trouble: missing corpus, unwritable output. Maps to exit 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optimizer axis label, e.g. "adamw", "muon", "normuon", "dion",
// "dion/16", optionally suffixed "@x0.5" with a learning-rate multiplier.
// "dion" alone keeps the configured rank fraction; "dion/N" pins it to 1/N.
struct OptimizerSpec {
  std::string label;          // original text, multiplier suffix included
  optim::Kind kind = optim::Kind::AdamW;
  bool has_rank = false;      // label carried an explicit /N rank
  double rank_fraction = 0.0; // valid when has_rank
  double lr_scale = 1.0;
};
OptimizerSpec parse_optimizer_spec(const std::string& text);

struct TrainingConfig {
  int64_t total_steps = 2000;
  int batch_size = 32;
  int64_t eval_tokens = 1 << 18;  // token budget per evaluation pass
  int64_t log_every = 200;        // checkpoint cadence in steps
  double val_fraction = 0.1;
  void validate() const;
};

struct SweepAxes {
  std::vector<int> ffn_mult;
  std::vector<std::string> optimizers;
  std::vector<double> lr_scale;
  std::vector<int> n_heads;
  std::vector<bool> use_rope;
  std::vector<double> postln_frac;
};

// One parsed config file. A single run uses the base model/optimizer
// fields; a sweep additionally expands the axes (absent axes fall back to
// one-element lists taken from the base config).
struct ExperimentConfig {
  model::ModelConfig model;
  optim::OptimizerConfig optimizer;
  std::string optimizer_name = "adamw";
  TrainingConfig training;
  std::string corpus_path;
  std::string out_dir = "out";
  uint64_t seed = 1;
  bool has_sweep = false;
  SweepAxes sweep;

  void validate() const;  // throws ConfigError
};

// Parses and validates a config document. Unknown keys, wrong types, and
// out-of-range values all throw ConfigError naming the offending field.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// Canonical JSON echo of the non-sweep portion (sorted keys, resolved
// defaults). Equal configs produce byte-equal strings.
std::string canonical_config_json(const ExperimentConfig& cfg);

// FNV-1a 64 over the canonical JSON, as 16 lowercase hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// Deterministic identity of one sweep cell. The architecture label folds
// head count, RoPE, and post-LN placement: "h2", "h4_nr", "h2_pl50".
std::string arch_label(const model::ModelConfig& m);
// "{optimizer}_{arch}_m{ffn_mult}" with filesystem-safe characters.
std::string run_id(const std::string& optimizer_label,
                   const model::ModelConfig& m);

struct Checkpoint {
  int64_t step = 0;
  double lr = 0.0;          // schedule value at this step count
  double train_loss = 0.0;  // mean over steps since previous checkpoint;
                            // NaN at step 0 (serialized as null)
  double val_loss = 0.0;
  double ppl = 0.0;         // exp(val_loss)
  std::map<std::string, double> metrics;  // flat "layer.probe.regime.metric"
};

struct RunRecord {
  std::string id;
  std::string optimizer_label;
  std::string architecture;
  int ffn_mult = 0;
  int d_model = 0;
  std::string status;  // "complete" | "diverged"
  int64_t diverged_at = -1;  // step index of the failing update
  std::string error;
  int64_t eval_tokens_used = 0;
  std::string hash;  // config hash the run was produced under
  std::vector<Checkpoint> checkpoints;
};

// Trains one model in cfg.out_dir, writing config.json, metrics.jsonl
// (one JSON object per checkpoint), run_record.json, last.ckpt at each
// checkpoint, and final.ckpt on completion. Non-finite losses or
// activations mark the record diverged; the last finished checkpoint and
// its weights stay on disk. Deterministic: a rerun reproduces every
// artifact byte for byte.
RunRecord run_single(const ExperimentConfig& cfg);

// Serialization used by run_single and the sweep reader.
std::string run_record_json(const RunRecord& rec);
RunRecord parse_run_record(const std::string& json_text);

struct SweepResult {
  std::vector<std::string> run_ids;  // execution order
  std::map<std::string, std::string> status;
  int executed = 0;
  int reused = 0;
  int diverged = 0;
};

// Expands the axes in deterministic order (optimizers outermost, then
// lr_scale, n_heads, use_rope, postln_frac, ffn_mult innermost), runs each
// cell under <out>/runs/<run_id>/, reuses any cell whose run_record.json
// already matches its config hash, keeps going past diverged cells, then
// writes sweep_manifest.json and fit_grid.csv.
SweepResult run_sweep(const ExperimentConfig& cfg);

// Per-cell expansion, exposed for tests: the fully resolved single-run
// config for one sweep cell (seeds and learning rates folded in).
ExperimentConfig cell_config(const ExperimentConfig& sweep, size_t index);
size_t cell_count(const ExperimentConfig& sweep);

// Everything the fit and report stages need from one finished run.
struct RunSummary {
  RunRecord record;
  bool complete() const { return record.status == "complete"; }
};

// Loads every runs/*/run_record.json under sweep_dir, sorted by run id.
std::vector<RunSummary> load_sweep_runs(const std::string& sweep_dir);

struct FitRow {
  std::string optimizer;
  std::string architecture;
  std::string regime;  // head | mid | tail | agg
  std::string metric;  // soft | hard
  fit::ScalingFit fit;
};

// Width-scaling fits over completed runs: log(rank) vs log(ffn width) per
// (optimizer, architecture, regime, metric), rank taken from the final
// checkpoint's layer-mean post-activation profile. Groups with fewer than
// two distinct widths are skipped.
std::vector<FitRow> fit_grid(const std::vector<RunSummary>& runs);

// Writes <sweep_dir>/fit_grid.csv from the run records on disk.
// Columns: optimizer,architecture,regime,metric,beta,r2,stderr.
void write_fit_grid(const std::string& sweep_dir);

// Runs the model over the leading validation windows (as many as the token
// budget buys, in batch_size chunks), filling capture when non-null.
// Returns the token-weighted mean cross-entropy.
double capture_eval(model::Model<float>& m, const data::Corpus& corpus,
                    const data::FrequencyStrata& strata, int batch_size,
                    int64_t eval_tokens, model::ProbeCapture* capture);

// Shared helpers.
uint64_t fnv1a64(const std::string& s);
std::string format_double(double v);  // %.17g, deterministic
constexpr const char* kRegimes[] = {"head", "mid", "tail", "agg"};
constexpr const char* kFitMetrics[] = {"soft", "hard"};

}  // namespace speclab::experiment
