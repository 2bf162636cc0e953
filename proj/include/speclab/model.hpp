// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "speclab/data.hpp"
#include "speclab/spectral.hpp"

namespace speclab::model {

// Decoder-only transformer: RMSNorm (placement per postln_frac), rotary
// positions with QK-normalization, squared-ReLU FFN, no biases, untied
// embedding and LM head.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int ffn_mult = 4;
  int vocab_size = 256;
  int seq_len = 128;
  bool use_rope = true;
  double postln_frac = 0.0;  // first floor(k * n_layers) layers use PostLN
  double rope_base = 10000.0;
  uint64_t seed = 1;

  int ffn_dim() const { return ffn_mult * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws std::invalid_argument
};

template <class T>
struct LayerParams {
  std::vector<T> wq, wk, wv, wo;  // d_model x d_model
  std::vector<T> attn_gain;       // d_model
  std::vector<T> w_in;            // D x d_model
  std::vector<T> w_out;           // d_model x D
  std::vector<T> ffn_gain;        // d_model
};

template <class T>
struct Params {
  std::vector<T> embedding;  // vocab x d_model
  std::vector<LayerParams<T>> layers;
  std::vector<T> final_gain;  // d_model
  std::vector<T> lm_head;     // vocab x d_model
};

// Named view over one parameter (or gradient) tensor. rows/cols are the
// functional (d_out, d_in): embedding rows are outputs of a vocab-wide
// one-hot, so it reports (d_model, vocab).
template <class T>
struct ParamView {
  std::string name;
  T* data = nullptr;
  size_t size = 0;
  int d_out = 0, d_in = 0;
  bool matrix_class = false;  // true: attention/FFN matrix (matrix-optimizer route)
  int store_rows = 0, store_cols = 0;  // physical row-major shape
};

// Streams FFN probe rows (pre-activation z, post-activation a) into per
// (layer, probe, regime) covariance and per-position accumulators. The
// aggregate regime is the merge of the three. All accumulation is double.
class ProbeCapture {
 public:
  static constexpr int kPre = 0;
  static constexpr int kPost = 1;

  // strata must outlive the capture; dim is the probed layer's FFN width.
  ProbeCapture(int n_layers, int dim, int n_positions,
               const data::FrequencyStrata* strata);

  // rows: n x dim block, row r belongs to sequence position positions[r]
  // and carries the regime of input token tokens[r].
  template <class T>
  void accumulate(int layer, int probe, const T* rows, int n,
                  const int32_t* tokens, const int32_t* positions);

  spectral::CovAccumulator& cov(int layer, int probe, data::Regime r);
  const spectral::CovAccumulator& cov(int layer, int probe, data::Regime r) const;
  spectral::CovAccumulator cov_agg(int layer, int probe) const;  // merged copy
  const spectral::PositionAccumulator& position(int layer, int probe,
                                                data::Regime r) const;
  spectral::PositionAccumulator position_agg(int layer, int probe) const;
  uint64_t count(int layer, int probe) const;  // total rows across regimes

  int n_layers() const { return n_layers_; }
  int dim() const { return dim_; }

 private:
  struct PerLayer {
    std::vector<spectral::CovAccumulator> cov;       // [probe*3 + regime]
    std::vector<spectral::PositionAccumulator> pos;  // same indexing
  };
  int n_layers_, dim_, n_positions_;
  const data::FrequencyStrata* strata_;
  std::vector<PerLayer> layers_;
  std::vector<double> stage_;  // regime-partitioned staging block
};

// Exposes forward/backward plus gradient buffers. float is the training
// instantiation; double exists for finite-difference checks and capture
// consistency tests.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);  // spectral-condition init from seed
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  const ModelConfig& config() const { return cfg_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }
  Params<T>& grads() { return grads_; }

  // Declaration-order views (embedding; per layer wq,wk,wv,wo,attn_gain,
  // w_in,w_out,ffn_gain; final_gain; lm_head).
  std::vector<ParamView<T>> param_views();
  std::vector<ParamView<T>> grad_views();

  // logits: (batch*seq) x vocab. Throws on out-of-range tokens and on
  // non-finite activations (message carries the layer index).
  void forward(const int32_t* tokens, int batch, int seq, T* logits,
               ProbeCapture* capture = nullptr);

  // Mean token cross-entropy plus gradient accumulation into grads().
  // zero_grads first unless accumulating deliberately.
  double loss_and_grads(const int32_t* tokens, const int32_t* targets,
                        int batch, int seq);

  // Forward-only mean cross-entropy (loss in double), optional capture.
  double eval_loss(const int32_t* tokens, const int32_t* targets, int batch,
                   int seq, ProbeCapture* capture = nullptr);

  void zero_grads();

 private:
  struct Workspace;
  void ensure_workspace(int batch, int seq);
  void forward_internal(const int32_t* tokens, int batch, int seq,
                        ProbeCapture* capture);
  bool layer_is_postln(int layer) const;

  ModelConfig cfg_;
  Params<T> params_, grads_;
  std::vector<T> rope_cos_, rope_sin_;  // seq_len x head_dim/2
  std::unique_ptr<Workspace> ws_;
};

extern template class Model<float>;
extern template class Model<double>;

// Single binary file: magic, version, config as fixed-order 64-bit fields,
// then row-major float32 payloads in declaration order.
template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path);
template <class T>
Model<T> load_checkpoint(const std::string& path);

}  // namespace speclab::model
