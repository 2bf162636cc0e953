// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speclab/linalg.hpp"

namespace speclab::data {

enum class Regime : uint8_t { Head = 0, Mid = 1, Tail = 2 };

const char* regime_name(Regime r);  // "head" | "mid" | "tail"

struct FrequencyTable {
  std::vector<uint64_t> counts;  // one per token type
  uint64_t total = 0;
};

FrequencyTable build_frequency_table(const uint8_t* bytes, size_t n, int vocab);

// Text format: one "token_id<TAB>count" line per type, sorted by id.
void save_frequency_table(const FrequencyTable& table, const std::string& path);
FrequencyTable load_frequency_table(const std::string& path);

// Tertile split of total token mass. Types are ranked by decreasing count
// (ties by ascending id); a type is HEAD while the cumulative mass ahead of
// it stays under a third of the total, MID under two thirds, TAIL otherwise.
// tau_head / tau_mid record the smallest count inside HEAD / MID.
struct FrequencyStrata {
  uint64_t tau_head = 0;
  uint64_t tau_mid = 0;
  std::vector<Regime> regime;  // per token type

  Regime of(int token) const { return regime[static_cast<size_t>(token)]; }
};

FrequencyStrata stratify(const FrequencyTable& table);

struct Corpus {
  std::vector<uint8_t> bytes;
  size_t train_len = 0;  // bytes [0, train_len) train; the rest validates
};

// Loads a byte corpus; the last val_fraction of it becomes the validation
// region.
Corpus load_corpus(const std::string& path, double val_fraction = 0.1);

struct Batch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int32_t> tokens;   // batch * seq_len
  std::vector<int32_t> targets;  // batch * seq_len, targets[t] = tokens[t+1]
  std::vector<Regime> tags;      // regime of each target token
};

// Uniformly random training windows, deterministic given the generator.
Batch sample_batch(linalg::Rng& rng, const Corpus& corpus,
                   const FrequencyStrata& strata, int batch, int seq_len);

// Validation windows are consecutive with stride seq_len.
size_t eval_window_count(const Corpus& corpus, int seq_len);
Batch eval_batch(const Corpus& corpus, const FrequencyStrata& strata,
                 size_t first_window, int n_windows, int seq_len);

}  // namespace speclab::data
