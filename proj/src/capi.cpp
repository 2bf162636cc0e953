// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// C ABI shim over the experiment and report layers. Exceptions stop at
// this boundary: each entry point maps them to a status code and stores
// the message on the context.

#include "speclab/speclab.h"

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "speclab/experiment.hpp"
#include "speclab/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using speclab::experiment::ConfigError;
using speclab::experiment::ExperimentConfig;
using speclab::experiment::IoError;
using speclab::experiment::RunRecord;

struct speclab_ctx {
  std::string error;
  std::string result;
};

namespace {

constexpr const char* kVersion = "0.1.0";

template <class Fn>
speclab_status guarded(speclab_ctx* ctx, Fn&& fn) {
  if (!ctx) return SPECLAB_ERR_CONFIG;
  ctx->error.clear();
  ctx->result.clear();
  try {
    return fn();
  } catch (const IoError& e) {
    ctx->error = e.what();
    return SPECLAB_ERR_IO;
  } catch (const std::invalid_argument& e) {  // ConfigError derives from this
    ctx->error = e.what();
    return SPECLAB_ERR_CONFIG;
  } catch (const std::exception& e) {
    ctx->error = e.what();
    return SPECLAB_ERR_IO;
  }
}

ExperimentConfig parse_with_overrides(const char* config_json,
                                      const char* out_dir, int has_seed,
                                      uint64_t seed) {
  if (!config_json) throw ConfigError("config: null document");
  ExperimentConfig cfg =
      speclab::experiment::parse_experiment_config(config_json);
  if (out_dir) cfg.out_dir = out_dir;
  if (has_seed) cfg.seed = seed;
  return cfg;
}

json record_summary(const RunRecord& rec, bool reused) {
  json j;
  j["id"] = rec.id;
  j["status"] = rec.status;
  j["reused"] = reused;
  j["checkpoints"] = rec.checkpoints.size();
  if (rec.status == "diverged") {
    j["diverged_at"] = rec.diverged_at;
    j["error"] = rec.error;
  } else if (!rec.checkpoints.empty()) {
    j["val_loss"] = rec.checkpoints.back().val_loss;
    j["ppl"] = rec.checkpoints.back().ppl;
  }
  return j;
}

}  // namespace

extern "C" {

const char* speclab_version(void) { return kVersion; }

speclab_ctx* speclab_open(void) { return new (std::nothrow) speclab_ctx(); }

void speclab_close(speclab_ctx* ctx) { delete ctx; }

const char* speclab_last_error(const speclab_ctx* ctx) {
  return ctx ? ctx->error.c_str() : "";
}

const char* speclab_result_json(const speclab_ctx* ctx) {
  return ctx ? ctx->result.c_str() : "";
}

speclab_status speclab_run(speclab_ctx* ctx, const char* config_json,
                           const char* out_dir, int has_seed, uint64_t seed,
                           int resume) {
  return guarded(ctx, [&]() -> speclab_status {
    ExperimentConfig cfg =
        parse_with_overrides(config_json, out_dir, has_seed, seed);
    if (cfg.has_sweep)
      throw ConfigError("config: has a sweep block; use the sweep entry point");
    if (resume) {
      const std::string record_path = cfg.out_dir + "/run_record.json";
      if (fs::exists(record_path)) {
        std::ifstream f(record_path, std::ios::binary);
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        try {
          RunRecord old = speclab::experiment::parse_run_record(text);
          if (old.hash == speclab::experiment::config_hash(cfg)) {
            ctx->result = record_summary(old, true).dump();
            if (old.status == "diverged") {
              ctx->error = old.error;
              return SPECLAB_ERR_DIVERGED;
            }
            return SPECLAB_OK;
          }
        } catch (const ConfigError&) {
          // stale record: fall through and retrain
        }
      }
    }
    RunRecord rec = speclab::experiment::run_single(cfg);
    ctx->result = record_summary(rec, false).dump();
    if (rec.status == "diverged") {
      ctx->error = rec.error;
      return SPECLAB_ERR_DIVERGED;
    }
    return SPECLAB_OK;
  });
}

speclab_status speclab_sweep(speclab_ctx* ctx, const char* config_json,
                             const char* out_dir, int has_seed, uint64_t seed,
                             int resume) {
  return guarded(ctx, [&]() -> speclab_status {
    ExperimentConfig cfg =
        parse_with_overrides(config_json, out_dir, has_seed, seed);
    if (!cfg.has_sweep) throw ConfigError("config: sweep block is required");
    (void)resume;  // sweeps always reuse cells whose config hash matches
    speclab::experiment::SweepResult res = speclab::experiment::run_sweep(cfg);
    json j;
    j["out"] = cfg.out_dir;
    j["runs"] = res.run_ids.size();
    j["executed"] = res.executed;
    j["reused"] = res.reused;
    j["diverged"] = res.diverged;
    json st = json::object();
    for (const auto& [id, status] : res.status) st[id] = status;
    j["status"] = std::move(st);
    ctx->result = j.dump();
    return SPECLAB_OK;
  });
}

speclab_status speclab_report(speclab_ctx* ctx, const char* sweep_dir) {
  return guarded(ctx, [&]() -> speclab_status {
    if (!sweep_dir) throw ConfigError("report: null sweep directory");
    if (!fs::exists(sweep_dir))
      throw IoError(std::string("sweep directory not found: ") + sweep_dir);
    speclab::experiment::write_fit_grid(sweep_dir);
    speclab::report::generate_report(sweep_dir);
    json j;
    j["out"] = std::string(sweep_dir) + "/report";
    ctx->result = j.dump();
    return SPECLAB_OK;
  });
}

speclab_status speclab_spectrum(speclab_ctx* ctx, const char* checkpoint_path,
                                const char* corpus_path, const char* out_dir,
                                int64_t eval_tokens, double val_fraction) {
  return guarded(ctx, [&]() -> speclab_status {
    if (!checkpoint_path || !corpus_path || !out_dir)
      throw ConfigError("spectrum: null argument");
    if (eval_tokens < 1) throw ConfigError("spectrum: eval_tokens must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw ConfigError("spectrum: val_fraction must be in (0, 1)");
    speclab::report::dump_spectra(checkpoint_path, corpus_path, out_dir,
                                  eval_tokens, val_fraction);
    json j;
    j["out"] = out_dir;
    ctx->result = j.dump();
    return SPECLAB_OK;
  });
}

speclab_status speclab_fit_file(speclab_ctx* ctx, const char* csv_path) {
  return guarded(ctx, [&]() -> speclab_status {
    if (!csv_path) throw ConfigError("fit: null path");
    speclab::fit::ScalingFit f = speclab::report::fit_points_file(csv_path);
    json j;
    j["beta"] = f.beta;
    j["intercept"] = f.intercept;
    j["r2"] = f.r2;
    j["stderr"] = f.stderr_beta;
    j["n_points"] = f.n_points;
    ctx->result = j.dump();
    return SPECLAB_OK;
  });
}

}  // extern "C"
