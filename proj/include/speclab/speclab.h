/* Copyright (c) 2026 speclab authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the spectral scaling laboratory. All functions are
 * synchronous and single-threaded; a context must not be shared across
 * threads. Strings returned by the library are owned by the context and
 * stay valid until its next call.
 */

#ifndef SPECLAB_SPECLAB_H_
#define SPECLAB_SPECLAB_H_

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum speclab_status {
  SPECLAB_OK = 0,
  SPECLAB_ERR_CONFIG = 1,   /* malformed or invalid configuration */
  SPECLAB_ERR_DIVERGED = 2, /* the requested run left the finite regime */
  SPECLAB_ERR_IO = 3        /* missing or unwritable files */
} speclab_status;

typedef struct speclab_ctx speclab_ctx;

/* Library version, e.g. "0.1.0". Static storage, always valid. */
const char* speclab_version(void);

/* Contexts are cheap; speclab_close(NULL) is a no-op. */
speclab_ctx* speclab_open(void);
void speclab_close(speclab_ctx* ctx);

/* Message from the most recent failing call on this context, or an empty
 * string after a success. Never NULL for a valid context. */
const char* speclab_last_error(const speclab_ctx* ctx);

/* JSON summary produced by the most recent successful call (run and sweep
 * outcomes, fit results), or an empty string. */
const char* speclab_result_json(const speclab_ctx* ctx);

/* Trains one model from a JSON config document (not a file path). out_dir,
 * when non-NULL, overrides the config's output directory; has_seed/seed
 * likewise override the config seed. With resume nonzero, a run directory
 * that already holds a record of the same config is not retrained.
 * Returns SPECLAB_ERR_DIVERGED when training left the finite regime; the
 * partial record is still written. */
speclab_status speclab_run(speclab_ctx* ctx, const char* config_json,
                           const char* out_dir, int has_seed, uint64_t seed,
                           int resume);

/* Runs every cell of the config's sweep axes under <out>/runs/, reusing
 * cells whose recorded config hash matches, then writes fit_grid.csv.
 * Diverged cells do not fail the sweep. */
speclab_status speclab_sweep(speclab_ctx* ctx, const char* config_json,
                             const char* out_dir, int has_seed, uint64_t seed,
                             int resume);

/* Rebuilds <sweep_dir>/fit_grid.csv and writes <sweep_dir>/report/ *.csv. */
speclab_status speclab_report(speclab_ctx* ctx, const char* sweep_dir);

/* Evaluates a saved checkpoint over its corpus validation region and
 * writes per-(layer, probe, regime) eigenspectrum text files to out_dir. */
speclab_status speclab_spectrum(speclab_ctx* ctx, const char* checkpoint_path,
                                const char* corpus_path, const char* out_dir,
                                int64_t eval_tokens, double val_fraction);

/* Fits log rank against log width from a two-column width,rank CSV file.
 * The result JSON carries beta, intercept, r2, stderr, and n_points. */
speclab_status speclab_fit_file(speclab_ctx* ctx, const char* csv_path);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SPECLAB_SPECLAB_H_ */
