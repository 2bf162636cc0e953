// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace speclab::data {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::Head: return "head";
    case Regime::Mid: return "mid";
    case Regime::Tail: return "tail";
  }
  return "?";
}

FrequencyTable build_frequency_table(const uint8_t* bytes, size_t n, int vocab) {
  if (vocab <= 0) throw std::invalid_argument("build_frequency_table: vocab must be > 0");
  FrequencyTable t;
  t.counts.assign(static_cast<size_t>(vocab), 0);
  for (size_t i = 0; i < n; ++i) {
    uint8_t b = bytes[i];
    if (b >= static_cast<unsigned>(vocab))
      throw std::invalid_argument("build_frequency_table: byte outside vocab");
    ++t.counts[b];
  }
  t.total = n;
  return t;
}

void save_frequency_table(const FrequencyTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_frequency_table: cannot open " + path);
  for (size_t id = 0; id < table.counts.size(); ++id)
    out << id << '\t' << table.counts[id] << '\n';
  if (!out) throw std::runtime_error("save_frequency_table: write failed for " + path);
}

FrequencyTable load_frequency_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_frequency_table: cannot open " + path);
  FrequencyTable t;
  std::string line;
  size_t expect = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("load_frequency_table: malformed line in " + path);
    size_t id = std::stoull(line.substr(0, tab));
    uint64_t count = std::stoull(line.substr(tab + 1));
    if (id != expect)
      throw std::runtime_error("load_frequency_table: ids must be dense and sorted in " + path);
    t.counts.push_back(count);
    t.total += count;
    ++expect;
  }
  if (t.counts.empty()) throw std::runtime_error("load_frequency_table: empty table in " + path);
  return t;
}

FrequencyStrata stratify(const FrequencyTable& table) {
  if (table.total == 0) throw std::invalid_argument("stratify: frequency table has no mass");
  const size_t v = table.counts.size();

  std::vector<uint32_t> order(v);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (table.counts[a] != table.counts[b]) return table.counts[a] > table.counts[b];
    return a < b;
  });

  FrequencyStrata s;
  s.regime.assign(v, Regime::Tail);
  const uint64_t m = table.total;
  uint64_t cum = 0;
  bool any_head = false, any_mid = false;
  for (uint32_t id : order) {
    uint64_t f = table.counts[id];
    Regime r;
    if (3 * cum < m) {
      r = Regime::Head;
      s.tau_head = f;  // monotone non-increasing along the walk
      any_head = true;
    } else if (3 * cum < 2 * m) {
      r = Regime::Mid;
      s.tau_mid = f;
      any_mid = true;
    } else {
      r = Regime::Tail;
    }
    s.regime[id] = r;
    cum += f;
  }
  (void)any_head;  // the first type is always HEAD since cum starts at 0
  if (!any_mid) s.tau_mid = s.tau_head;  // empty MID band
  return s;
}

Corpus load_corpus(const std::string& path, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw std::invalid_argument("load_corpus: val_fraction must be in [0, 1)");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  Corpus c;
  in.seekg(0, std::ios::end);
  std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  c.bytes.resize(static_cast<size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(c.bytes.data()), len);
  if (!in) throw std::runtime_error("load_corpus: read failed for " + path);
  size_t val_len = static_cast<size_t>(static_cast<double>(c.bytes.size()) * val_fraction);
  c.train_len = c.bytes.size() - val_len;
  return c;
}

Batch sample_batch(linalg::Rng& rng, const Corpus& corpus,
                   const FrequencyStrata& strata, int batch, int seq_len) {
  if (batch <= 0 || seq_len <= 0)
    throw std::invalid_argument("sample_batch: batch and seq_len must be > 0");
  if (corpus.train_len < static_cast<size_t>(seq_len) + 1)
    throw std::invalid_argument("sample_batch: training region shorter than one window");
  Batch out;
  out.batch = batch;
  out.seq_len = seq_len;
  size_t n = static_cast<size_t>(batch) * seq_len;
  out.tokens.resize(n);
  out.targets.resize(n);
  out.tags.resize(n);
  uint64_t span = corpus.train_len - static_cast<size_t>(seq_len);
  for (int b = 0; b < batch; ++b) {
    size_t start = rng.next_below(span);
    size_t base = static_cast<size_t>(b) * seq_len;
    for (int t = 0; t < seq_len; ++t) {
      int32_t tok = corpus.bytes[start + t];
      int32_t tgt = corpus.bytes[start + t + 1];
      out.tokens[base + t] = tok;
      out.targets[base + t] = tgt;
      out.tags[base + t] = strata.of(tgt);
    }
  }
  return out;
}

size_t eval_window_count(const Corpus& corpus, int seq_len) {
  if (seq_len <= 0) throw std::invalid_argument("eval_window_count: seq_len must be > 0");
  size_t val_len = corpus.bytes.size() - corpus.train_len;
  if (val_len < static_cast<size_t>(seq_len) + 1) return 0;
  return (val_len - 1) / static_cast<size_t>(seq_len);
}

Batch eval_batch(const Corpus& corpus, const FrequencyStrata& strata,
                 size_t first_window, int n_windows, int seq_len) {
  size_t avail = eval_window_count(corpus, seq_len);
  if (first_window + static_cast<size_t>(n_windows) > avail)
    throw std::invalid_argument("eval_batch: window range exceeds validation region");
  Batch out;
  out.batch = n_windows;
  out.seq_len = seq_len;
  size_t n = static_cast<size_t>(n_windows) * seq_len;
  out.tokens.resize(n);
  out.targets.resize(n);
  out.tags.resize(n);
  for (int w = 0; w < n_windows; ++w) {
    size_t start = corpus.train_len + (first_window + w) * static_cast<size_t>(seq_len);
    size_t base = static_cast<size_t>(w) * seq_len;
    for (int t = 0; t < seq_len; ++t) {
      int32_t tok = corpus.bytes[start + t];
      int32_t tgt = corpus.bytes[start + t + 1];
      out.tokens[base + t] = tok;
      out.targets[base + t] = tgt;
      out.tags[base + t] = strata.of(tgt);
    }
  }
  return out;
}

}  // namespace speclab::data
