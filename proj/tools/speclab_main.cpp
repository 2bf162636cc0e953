// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the library exclusively through the C
// interface; all heavy lifting lives behind speclab.h. Exit codes: 0
// success, 1 bad configuration or usage, 2 diverged run, 3 I/O trouble.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "speclab/speclab.h"

namespace {

bool read_file(const std::string& path, std::string* out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return false;
  std::ostringstream ss;
  ss << f.rdbuf();
  *out = ss.str();
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speclab: optimizer-dependent spectral scaling experiments"};
  app.set_version_flag("--version", std::string("speclab ") + speclab_version());
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, corpus_path, points_path;
  uint64_t seed = 0;
  bool resume = false;
  int64_t eval_tokens = int64_t{1} << 18;
  double val_fraction = 0.1;

  CLI::App* run = app.add_subcommand("run", "train a single model");
  run->add_option("--config", config_path, "JSON experiment config file")
      ->required();
  CLI::Option* run_out =
      run->add_option("--out", out_dir, "override the output directory");
  CLI::Option* run_seed = run->add_option("--seed", seed, "override the seed");
  run->add_flag("--resume", resume,
                "reuse an existing record of the same config");

  CLI::App* sweep = app.add_subcommand("sweep", "run a Cartesian sweep");
  sweep->add_option("--config", config_path, "JSON experiment config file")
      ->required();
  CLI::Option* sweep_out =
      sweep->add_option("--out", out_dir, "override the output directory");
  CLI::Option* sweep_seed =
      sweep->add_option("--seed", seed, "override the seed");
  sweep->add_flag("--resume", resume,
                  "matching cells are always reused; accepted for symmetry");

  CLI::App* report =
      app.add_subcommand("report", "rebuild fit grid and report tables");
  report->add_option("--out", out_dir, "sweep directory to summarize")
      ->required();

  CLI::App* spectrum =
      app.add_subcommand("spectrum", "dump eigenspectra of a checkpoint");
  spectrum->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  spectrum->add_option("--corpus", corpus_path, "byte corpus file")->required();
  spectrum->add_option("--out", out_dir, "directory for spectrum files")
      ->required();
  spectrum->add_option("--tokens", eval_tokens, "evaluation token budget");
  spectrum->add_option("--val-fraction", val_fraction,
                       "trailing fraction of the corpus used for evaluation");

  CLI::App* fit = app.add_subcommand("fit", "fit a width,rank CSV");
  fit->add_option("--points", points_path, "two-column width,rank CSV file")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  speclab_ctx* ctx = speclab_open();
  if (!ctx) {
    std::fprintf(stderr, "speclab: out of memory\n");
    return 3;
  }
  speclab_status st = SPECLAB_OK;

  if (run->parsed() || sweep->parsed()) {
    std::string config_text;
    if (!read_file(config_path, &config_text)) {
      std::fprintf(stderr, "speclab: cannot read %s\n", config_path.c_str());
      speclab_close(ctx);
      return SPECLAB_ERR_IO;
    }
    if (run->parsed()) {
      st = speclab_run(ctx, config_text.c_str(),
                       run_out->count() ? out_dir.c_str() : nullptr,
                       run_seed->count() ? 1 : 0, seed, resume ? 1 : 0);
    } else {
      st = speclab_sweep(ctx, config_text.c_str(),
                         sweep_out->count() ? out_dir.c_str() : nullptr,
                         sweep_seed->count() ? 1 : 0, seed, resume ? 1 : 0);
    }
  } else if (report->parsed()) {
    st = speclab_report(ctx, out_dir.c_str());
  } else if (spectrum->parsed()) {
    st = speclab_spectrum(ctx, ckpt_path.c_str(), corpus_path.c_str(),
                          out_dir.c_str(), eval_tokens, val_fraction);
  } else if (fit->parsed()) {
    st = speclab_fit_file(ctx, points_path.c_str());
  }

  const char* result = speclab_result_json(ctx);
  if (result && result[0]) std::printf("%s\n", result);
  if (st != SPECLAB_OK)
    std::fprintf(stderr, "speclab: %s\n", speclab_last_error(ctx));
  speclab_close(ctx);
  return static_cast<int>(st);
}
