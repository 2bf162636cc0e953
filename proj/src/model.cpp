// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "speclab/linalg.hpp"

namespace speclab::model {

using linalg::gemm_nn;
using linalg::gemm_nt;
using linalg::gemm_tn;

namespace {

constexpr double kNormEps = 1e-6;

template <class T>
bool all_finite(const T* p, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

// y = gain * x / rms(x) per row; inv[r] = 1/rms kept for backward.
template <class T>
void rmsnorm_fwd(const T* x, const T* gain, int n, int d, T* y, T* inv) {
  for (int r = 0; r < n; ++r) {
    const T* xr = x + static_cast<size_t>(r) * d;
    T* yr = y + static_cast<size_t>(r) * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += static_cast<double>(xr[j]) * xr[j];
    T iv = static_cast<T>(1.0 / std::sqrt(ms / d + kNormEps));
    inv[r] = iv;
    for (int j = 0; j < d; ++j) yr[j] = gain[j] * xr[j] * iv;
  }
}

// dx += rmsnorm backward; dgain += per-channel gradient.
template <class T>
void rmsnorm_bwd(const T* x, const T* inv, const T* gain, const T* dy, int n,
                 int d, T* dx, T* dgain) {
  for (int r = 0; r < n; ++r) {
    const T* xr = x + static_cast<size_t>(r) * d;
    const T* dyr = dy + static_cast<size_t>(r) * d;
    T* dxr = dx + static_cast<size_t>(r) * d;
    T iv = inv[r];
    double h = 0.0;
    for (int j = 0; j < d; ++j) {
      h += static_cast<double>(dyr[j]) * gain[j] * xr[j];
      dgain[j] += dyr[j] * xr[j] * iv;
    }
    T c = static_cast<T>(static_cast<double>(iv) * iv * iv * h / d);
    for (int j = 0; j < d; ++j) dxr[j] += iv * gain[j] * dyr[j] - c * xr[j];
  }
}

// Non-parametric RMSNorm over each head's slice of every row.
template <class T>
void qknorm_fwd(const T* x, int n, int heads, int hd, int ld, T* y, T* inv) {
  for (int r = 0; r < n; ++r)
    for (int h = 0; h < heads; ++h) {
      const T* xr = x + static_cast<size_t>(r) * ld + h * hd;
      T* yr = y + static_cast<size_t>(r) * ld + h * hd;
      double ms = 0.0;
      for (int j = 0; j < hd; ++j) ms += static_cast<double>(xr[j]) * xr[j];
      T iv = static_cast<T>(1.0 / std::sqrt(ms / hd + kNormEps));
      inv[static_cast<size_t>(r) * heads + h] = iv;
      for (int j = 0; j < hd; ++j) yr[j] = xr[j] * iv;
    }
}

template <class T>
void qknorm_bwd(const T* x, const T* inv, const T* dy, int n, int heads,
                int hd, int ld, T* dx) {
  for (int r = 0; r < n; ++r)
    for (int h = 0; h < heads; ++h) {
      const T* xr = x + static_cast<size_t>(r) * ld + h * hd;
      const T* dyr = dy + static_cast<size_t>(r) * ld + h * hd;
      T* dxr = dx + static_cast<size_t>(r) * ld + h * hd;
      T iv = inv[static_cast<size_t>(r) * heads + h];
      double s = 0.0;
      for (int j = 0; j < hd; ++j) s += static_cast<double>(dyr[j]) * xr[j];
      T c = static_cast<T>(static_cast<double>(iv) * iv * iv * s / hd);
      for (int j = 0; j < hd; ++j) dxr[j] = iv * dyr[j] - c * xr[j];
    }
}

// Interleaved-pair rotation per head; inverse applies the transpose.
template <class T>
void rope_apply(T* x, int n, int seq, int heads, int hd, int ld,
                const T* cos_t, const T* sin_t, bool inverse) {
  int half = hd / 2;
  for (int r = 0; r < n; ++r) {
    int pos = r % seq;
    const T* cr = cos_t + static_cast<size_t>(pos) * half;
    const T* sr = sin_t + static_cast<size_t>(pos) * half;
    for (int h = 0; h < heads; ++h) {
      T* xr = x + static_cast<size_t>(r) * ld + h * hd;
      for (int j = 0; j < half; ++j) {
        T a = xr[2 * j], b = xr[2 * j + 1];
        T c = cr[j], s = inverse ? -sr[j] : sr[j];
        xr[2 * j] = a * c - b * s;
        xr[2 * j + 1] = a * s + b * c;
      }
    }
  }
}

template <class T>
void fill_zero(std::vector<T>& v) {
  std::fill(v.begin(), v.end(), T(0));
}

double spectral_sigma(int d_out, int d_in) {
  double s = 1.0 / std::sqrt(static_cast<double>(d_in));
  double r = std::sqrt(static_cast<double>(d_out) / d_in);
  return s * std::min(1.0, r);
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (n_layers < 0) throw std::invalid_argument("config: n_layers < 0");
  if (n_heads <= 0 || d_model <= 0 || ffn_mult <= 0 || vocab_size <= 0 ||
      seq_len <= 0)
    throw std::invalid_argument("config: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("config: d_model not divisible by n_heads");
  if (use_rope && head_dim() % 2 != 0)
    throw std::invalid_argument("config: rotary positions need even head_dim");
  if (postln_frac < 0.0 || postln_frac > 1.0)
    throw std::invalid_argument("config: postln_frac outside [0, 1]");
  if (rope_base <= 0.0) throw std::invalid_argument("config: rope_base <= 0");
}

// ---------------------------------------------------------------- capture

ProbeCapture::ProbeCapture(int n_layers, int dim, int n_positions,
                           const data::FrequencyStrata* strata)
    : n_layers_(n_layers), dim_(dim), n_positions_(n_positions),
      strata_(strata) {
  if (n_layers <= 0 || dim <= 0 || n_positions <= 0)
    throw std::invalid_argument("capture: sizes must be positive");
  if (strata == nullptr)
    throw std::invalid_argument("capture: strata required for regime tags");
  layers_.resize(n_layers);
  for (auto& l : layers_) {
    l.cov.reserve(6);
    l.pos.reserve(6);
    for (int i = 0; i < 6; ++i) {
      l.cov.emplace_back(dim);
      l.pos.emplace_back(dim, n_positions);
    }
  }
}

template <class T>
void ProbeCapture::accumulate(int layer, int probe, const T* rows, int n,
                              const int32_t* tokens, const int32_t* positions) {
  if (layer < 0 || layer >= n_layers_ || (probe != kPre && probe != kPost))
    throw std::invalid_argument("capture: bad layer or probe index");
  PerLayer& pl = layers_[layer];
  int counts[3] = {0, 0, 0};
  for (int r = 0; r < n; ++r)
    ++counts[static_cast<int>(strata_->of(tokens[r]))];
  stage_.resize(static_cast<size_t>(n) * dim_);
  size_t offs[3];
  offs[0] = 0;
  offs[1] = static_cast<size_t>(counts[0]) * dim_;
  offs[2] = offs[1] + static_cast<size_t>(counts[1]) * dim_;
  size_t fill[3] = {offs[0], offs[1], offs[2]};
  for (int r = 0; r < n; ++r) {
    int g = static_cast<int>(strata_->of(tokens[r]));
    double* dst = stage_.data() + fill[g];
    const T* src = rows + static_cast<size_t>(r) * dim_;
    for (int j = 0; j < dim_; ++j) dst[j] = static_cast<double>(src[j]);
    pl.pos[probe * 3 + g].add_row(dst, positions[r]);
    fill[g] += dim_;
  }
  for (int g = 0; g < 3; ++g)
    if (counts[g] > 0)
      pl.cov[probe * 3 + g].add_rows(stage_.data() + offs[g], counts[g], dim_);
}

template void ProbeCapture::accumulate<float>(int, int, const float*, int,
                                              const int32_t*, const int32_t*);
template void ProbeCapture::accumulate<double>(int, int, const double*, int,
                                               const int32_t*, const int32_t*);

spectral::CovAccumulator& ProbeCapture::cov(int layer, int probe,
                                            data::Regime r) {
  return layers_[layer].cov[probe * 3 + static_cast<int>(r)];
}

const spectral::CovAccumulator& ProbeCapture::cov(int layer, int probe,
                                                  data::Regime r) const {
  return layers_[layer].cov[probe * 3 + static_cast<int>(r)];
}

spectral::CovAccumulator ProbeCapture::cov_agg(int layer, int probe) const {
  spectral::CovAccumulator agg(dim_);
  for (int g = 0; g < 3; ++g) agg.merge(layers_[layer].cov[probe * 3 + g]);
  return agg;
}

const spectral::PositionAccumulator& ProbeCapture::position(
    int layer, int probe, data::Regime r) const {
  return layers_[layer].pos[probe * 3 + static_cast<int>(r)];
}

spectral::PositionAccumulator ProbeCapture::position_agg(int layer,
                                                         int probe) const {
  spectral::PositionAccumulator agg(dim_, n_positions_);
  for (int g = 0; g < 3; ++g) agg.merge(layers_[layer].pos[probe * 3 + g]);
  return agg;
}

uint64_t ProbeCapture::count(int layer, int probe) const {
  uint64_t n = 0;
  for (int g = 0; g < 3; ++g) n += layers_[layer].cov[probe * 3 + g].n;
  return n;
}

// ---------------------------------------------------------------- model

// Per-layer forward stash plus shared backward scratch.
template <class T>
struct Model<T>::Workspace {
  int batch = 0, seq = 0;

  std::vector<int32_t> positions;
  std::vector<T> x0, logits, xf, inv_f;

  struct LayerBuf {
    std::vector<T> n1;            // pre-attn norm output (PreLN only)
    std::vector<T> q, k, v;       // q/k hold rotated pre-QK-norm values
    std::vector<T> qn, kn;        // post-QK-norm
    std::vector<T> inv_q, inv_k;  // n*heads
    std::vector<T> probs;         // batch*heads*seq*seq softmax rows
    std::vector<T> ctx;
    std::vector<T> s1;            // x + attn_out
    std::vector<T> xm_post;       // rmsnorm(s1) (PostLN only)
    std::vector<T> n2;            // pre-FFN norm output (PreLN only)
    std::vector<T> z, a;          // FFN pre/post activation, n x D
    std::vector<T> s2;            // x_mid + ffn_out
    std::vector<T> xn_post;       // rmsnorm(s2) (PostLN only)
    std::vector<T> inv1, inv2;    // per-row inverse rms for the two norms
  };
  std::vector<LayerBuf> layers;

  // shared scratch
  std::vector<T> ao, fo;                     // sublayer outputs
  std::vector<T> dx, dxm, ds, dq, dk, dv, dctx, dfin;  // n x d
  std::vector<T> dz, da;                     // n x D
  std::vector<T> dp_buf, dscore_buf;         // seq x seq
};

template <class T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int d = cfg_.d_model, D = cfg_.ffn_dim(), V = cfg_.vocab_size;
  linalg::Rng rng(cfg_.seed);

  auto init_matrix = [&](std::vector<T>& w, int d_out, int d_in, size_t count) {
    double sigma = spectral_sigma(d_out, d_in);
    w.resize(count);
    for (T& x : w) x = static_cast<T>(sigma * rng.next_normal());
  };
  auto init_gain = [&](std::vector<T>& g, int n) { g.assign(n, T(1)); };

  init_matrix(params_.embedding, d, V, static_cast<size_t>(V) * d);
  params_.layers.resize(cfg_.n_layers);
  for (auto& l : params_.layers) {
    init_matrix(l.wq, d, d, static_cast<size_t>(d) * d);
    init_matrix(l.wk, d, d, static_cast<size_t>(d) * d);
    init_matrix(l.wv, d, d, static_cast<size_t>(d) * d);
    init_matrix(l.wo, d, d, static_cast<size_t>(d) * d);
    init_gain(l.attn_gain, d);
    init_matrix(l.w_in, D, d, static_cast<size_t>(D) * d);
    init_matrix(l.w_out, d, D, static_cast<size_t>(d) * D);
    init_gain(l.ffn_gain, d);
  }
  init_gain(params_.final_gain, d);
  init_matrix(params_.lm_head, V, d, static_cast<size_t>(V) * d);

  // Gradient buffers mirror the parameters.
  grads_.embedding.assign(params_.embedding.size(), T(0));
  grads_.layers.resize(cfg_.n_layers);
  for (int i = 0; i < cfg_.n_layers; ++i) {
    auto& g = grads_.layers[i];
    const auto& p = params_.layers[i];
    g.wq.assign(p.wq.size(), T(0));
    g.wk.assign(p.wk.size(), T(0));
    g.wv.assign(p.wv.size(), T(0));
    g.wo.assign(p.wo.size(), T(0));
    g.attn_gain.assign(p.attn_gain.size(), T(0));
    g.w_in.assign(p.w_in.size(), T(0));
    g.w_out.assign(p.w_out.size(), T(0));
    g.ffn_gain.assign(p.ffn_gain.size(), T(0));
  }
  grads_.final_gain.assign(params_.final_gain.size(), T(0));
  grads_.lm_head.assign(params_.lm_head.size(), T(0));

  // Rotary tables for all positions up to seq_len.
  int half = cfg_.head_dim() / 2;
  if (cfg_.use_rope && half > 0) {
    rope_cos_.resize(static_cast<size_t>(cfg_.seq_len) * half);
    rope_sin_.resize(static_cast<size_t>(cfg_.seq_len) * half);
    for (int pos = 0; pos < cfg_.seq_len; ++pos)
      for (int j = 0; j < half; ++j) {
        double freq = std::pow(cfg_.rope_base, -2.0 * j / cfg_.head_dim());
        rope_cos_[static_cast<size_t>(pos) * half + j] =
            static_cast<T>(std::cos(pos * freq));
        rope_sin_[static_cast<size_t>(pos) * half + j] =
            static_cast<T>(std::sin(pos * freq));
      }
  }
  ws_ = std::make_unique<Workspace>();
}

template <class T>
Model<T>::Model(Model&&) noexcept = default;
template <class T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;
template <class T>
Model<T>::~Model() = default;

template <class T>
bool Model<T>::layer_is_postln(int layer) const {
  return layer < static_cast<int>(cfg_.postln_frac * cfg_.n_layers);
}

template <class T>
std::vector<ParamView<T>> Model<T>::param_views() {
  std::vector<ParamView<T>> v;
  int d = cfg_.d_model, D = cfg_.ffn_dim(), V = cfg_.vocab_size;
  auto add = [&](const std::string& name, std::vector<T>& w, int d_out,
                 int d_in, bool matrix, int rows, int cols) {
    v.push_back({name, w.data(), w.size(), d_out, d_in, matrix, rows, cols});
  };
  add("embedding", params_.embedding, d, V, false, V, d);
  for (int i = 0; i < cfg_.n_layers; ++i) {
    auto& l = params_.layers[i];
    std::string p = "layer" + std::to_string(i) + ".";
    add(p + "wq", l.wq, d, d, true, d, d);
    add(p + "wk", l.wk, d, d, true, d, d);
    add(p + "wv", l.wv, d, d, true, d, d);
    add(p + "wo", l.wo, d, d, true, d, d);
    add(p + "attn_gain", l.attn_gain, d, 1, false, 1, d);
    add(p + "w_in", l.w_in, D, d, true, D, d);
    add(p + "w_out", l.w_out, d, D, true, d, D);
    add(p + "ffn_gain", l.ffn_gain, d, 1, false, 1, d);
  }
  add("final_gain", params_.final_gain, d, 1, false, 1, d);
  add("lm_head", params_.lm_head, V, d, false, V, d);
  return v;
}

template <class T>
std::vector<ParamView<T>> Model<T>::grad_views() {
  // Same order and shapes as param_views, pointing at the gradients.
  std::vector<ParamView<T>> pv = param_views();
  std::vector<ParamView<T>> gv = pv;
  size_t idx = 0;
  gv[idx++].data = grads_.embedding.data();
  for (int i = 0; i < cfg_.n_layers; ++i) {
    auto& g = grads_.layers[i];
    gv[idx++].data = g.wq.data();
    gv[idx++].data = g.wk.data();
    gv[idx++].data = g.wv.data();
    gv[idx++].data = g.wo.data();
    gv[idx++].data = g.attn_gain.data();
    gv[idx++].data = g.w_in.data();
    gv[idx++].data = g.w_out.data();
    gv[idx++].data = g.ffn_gain.data();
  }
  gv[idx++].data = grads_.final_gain.data();
  gv[idx++].data = grads_.lm_head.data();
  return gv;
}

template <class T>
void Model<T>::zero_grads() {
  fill_zero(grads_.embedding);
  for (auto& g : grads_.layers) {
    fill_zero(g.wq);
    fill_zero(g.wk);
    fill_zero(g.wv);
    fill_zero(g.wo);
    fill_zero(g.attn_gain);
    fill_zero(g.w_in);
    fill_zero(g.w_out);
    fill_zero(g.ffn_gain);
  }
  fill_zero(grads_.final_gain);
  fill_zero(grads_.lm_head);
}

template <class T>
void Model<T>::ensure_workspace(int batch, int seq) {
  Workspace& w = *ws_;
  if (w.batch == batch && w.seq == seq) return;
  int d = cfg_.d_model, D = cfg_.ffn_dim(), V = cfg_.vocab_size;
  int H = cfg_.n_heads;
  size_t n = static_cast<size_t>(batch) * seq;

  w.batch = batch;
  w.seq = seq;
  w.positions.resize(n);
  for (size_t r = 0; r < n; ++r)
    w.positions[r] = static_cast<int32_t>(r % static_cast<size_t>(seq));
  w.x0.resize(n * d);
  w.logits.resize(n * V);
  w.xf.resize(n * d);
  w.inv_f.resize(n);

  w.layers.resize(cfg_.n_layers);
  for (auto& l : w.layers) {
    l.n1.resize(n * d);
    l.q.resize(n * d);
    l.k.resize(n * d);
    l.v.resize(n * d);
    l.qn.resize(n * d);
    l.kn.resize(n * d);
    l.inv_q.resize(n * H);
    l.inv_k.resize(n * H);
    l.probs.resize(static_cast<size_t>(batch) * H * seq * seq);
    l.ctx.resize(n * d);
    l.s1.resize(n * d);
    l.xm_post.resize(n * d);
    l.n2.resize(n * d);
    l.z.resize(n * D);
    l.a.resize(n * D);
    l.s2.resize(n * d);
    l.xn_post.resize(n * d);
    l.inv1.resize(n);
    l.inv2.resize(n);
  }
  w.ao.resize(n * d);
  w.fo.resize(n * d);
  w.dx.resize(n * d);
  w.dxm.resize(n * d);
  w.ds.resize(n * d);
  w.dq.resize(n * d);
  w.dk.resize(n * d);
  w.dv.resize(n * d);
  w.dctx.resize(n * d);
  w.dfin.resize(n * d);
  w.dz.resize(n * D);
  w.da.resize(n * D);
  w.dp_buf.resize(static_cast<size_t>(seq) * seq);
  w.dscore_buf.resize(static_cast<size_t>(seq) * seq);
}

template <class T>
void Model<T>::forward_internal(const int32_t* tokens, int batch, int seq,
                                ProbeCapture* capture) {
  if (batch <= 0 || seq <= 0) throw std::invalid_argument("model: empty batch");
  if (seq > cfg_.seq_len)
    throw std::invalid_argument("model: sequence longer than seq_len");
  if (capture != nullptr && (capture->dim() != cfg_.ffn_dim() ||
                             capture->n_layers() < cfg_.n_layers))
    throw std::invalid_argument("model: capture shape mismatch");
  ensure_workspace(batch, seq);
  Workspace& w = *ws_;
  int d = cfg_.d_model, D = cfg_.ffn_dim(), V = cfg_.vocab_size;
  int H = cfg_.n_heads, hd = cfg_.head_dim();
  int n = batch * seq;
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  for (int r = 0; r < n; ++r) {
    int32_t tok = tokens[r];
    if (tok < 0 || tok >= V)
      throw std::invalid_argument("model: token id out of range");
    std::memcpy(w.x0.data() + static_cast<size_t>(r) * d,
                params_.embedding.data() + static_cast<size_t>(tok) * d,
                sizeof(T) * d);
  }

  const T* x = w.x0.data();
  for (int li = 0; li < cfg_.n_layers; ++li) {
    auto& P = params_.layers[li];
    auto& L = w.layers[li];
    bool post = layer_is_postln(li);

    // Attention sublayer.
    const T* ain = x;
    if (!post) {
      rmsnorm_fwd(x, P.attn_gain.data(), n, d, L.n1.data(), L.inv1.data());
      ain = L.n1.data();
    }
    gemm_nt<T>(n, d, d, ain, d, P.wq.data(), d, L.q.data(), d, false);
    gemm_nt<T>(n, d, d, ain, d, P.wk.data(), d, L.k.data(), d, false);
    gemm_nt<T>(n, d, d, ain, d, P.wv.data(), d, L.v.data(), d, false);
    if (cfg_.use_rope) {
      rope_apply(L.q.data(), n, seq, H, hd, d, rope_cos_.data(),
                 rope_sin_.data(), false);
      rope_apply(L.k.data(), n, seq, H, hd, d, rope_cos_.data(),
                 rope_sin_.data(), false);
    }
    qknorm_fwd(L.q.data(), n, H, hd, d, L.qn.data(), L.inv_q.data());
    qknorm_fwd(L.k.data(), n, H, hd, d, L.kn.data(), L.inv_k.data());

    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < H; ++h) {
        const T* qbh = L.qn.data() + static_cast<size_t>(b) * seq * d + h * hd;
        const T* kbh = L.kn.data() + static_cast<size_t>(b) * seq * d + h * hd;
        const T* vbh = L.v.data() + static_cast<size_t>(b) * seq * d + h * hd;
        T* pbh = L.probs.data() +
                 (static_cast<size_t>(b) * H + h) * seq * seq;
        T* cbh = L.ctx.data() + static_cast<size_t>(b) * seq * d + h * hd;
        gemm_nt<T>(seq, seq, hd, qbh, d, kbh, d, pbh, seq, false);
        // Causal softmax with max subtraction; masked entries become exact 0.
        for (int i = 0; i < seq; ++i) {
          T* row = pbh + static_cast<size_t>(i) * seq;
          T mx = row[0] * scale;
          for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j] * scale);
          double sum = 0.0;
          for (int j = 0; j <= i; ++j) {
            T e = std::exp(row[j] * scale - mx);
            row[j] = e;
            sum += static_cast<double>(e);
          }
          T is = static_cast<T>(1.0 / sum);
          for (int j = 0; j <= i; ++j) row[j] *= is;
          for (int j = i + 1; j < seq; ++j) row[j] = T(0);
        }
        gemm_nn<T>(seq, hd, seq, pbh, seq, vbh, d, cbh, d, false);
      }
    gemm_nt<T>(n, d, d, L.ctx.data(), d, P.wo.data(), d, w.ao.data(), d, false);
    for (int i = 0; i < n * d; ++i) L.s1[i] = x[i] + w.ao[i];
    const T* xm = L.s1.data();
    if (post) {
      rmsnorm_fwd(L.s1.data(), P.attn_gain.data(), n, d, L.xm_post.data(),
                  L.inv1.data());
      xm = L.xm_post.data();
    }

    // FFN sublayer with probe points.
    const T* fin = xm;
    if (!post) {
      rmsnorm_fwd(xm, P.ffn_gain.data(), n, d, L.n2.data(), L.inv2.data());
      fin = L.n2.data();
    }
    gemm_nt<T>(n, D, d, fin, d, P.w_in.data(), d, L.z.data(), D, false);
    for (size_t i = 0; i < L.z.size(); ++i) {
      T zv = L.z[i] > T(0) ? L.z[i] : T(0);
      L.a[i] = zv * zv;
    }
    if (capture != nullptr) {
      capture->accumulate(li, ProbeCapture::kPre, L.z.data(), n, tokens,
                          w.positions.data());
      capture->accumulate(li, ProbeCapture::kPost, L.a.data(), n, tokens,
                          w.positions.data());
    }
    gemm_nt<T>(n, d, D, L.a.data(), D, P.w_out.data(), D, w.fo.data(), d,
               false);
    for (int i = 0; i < n * d; ++i) L.s2[i] = xm[i] + w.fo[i];
    const T* xn = L.s2.data();
    if (post) {
      rmsnorm_fwd(L.s2.data(), P.ffn_gain.data(), n, d, L.xn_post.data(),
                  L.inv2.data());
      xn = L.xn_post.data();
    }
    if (!all_finite(xn, static_cast<size_t>(n) * d))
      throw std::runtime_error("model: non-finite activations in layer " +
                               std::to_string(li));
    x = xn;
  }

  rmsnorm_fwd(x, params_.final_gain.data(), n, d, w.xf.data(), w.inv_f.data());
  gemm_nt<T>(n, V, d, w.xf.data(), d, params_.lm_head.data(), d,
             w.logits.data(), V, false);
  if (!all_finite(w.logits.data(), w.logits.size()))
    throw std::runtime_error("model: non-finite logits in output head");
}

template <class T>
void Model<T>::forward(const int32_t* tokens, int batch, int seq, T* logits,
                       ProbeCapture* capture) {
  forward_internal(tokens, batch, seq, capture);
  std::memcpy(logits, ws_->logits.data(), sizeof(T) * ws_->logits.size());
}

namespace {

// Mean cross-entropy over rows; when dlogits is non-null it receives
// (softmax - onehot) / n_rows in place of the logits.
template <class T>
double cross_entropy(T* logits, const int32_t* targets, int n, int v,
                     bool want_grad) {
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    T* row = logits + static_cast<size_t>(r) * v;
    int32_t y = targets[r];
    if (y < 0 || y >= v)
      throw std::invalid_argument("model: target id out of range");
    T mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    double lse = static_cast<double>(mx) + std::log(sum);
    total += lse - static_cast<double>(row[y]);
    if (want_grad) {
      T inv_n = static_cast<T>(1.0 / n);
      for (int j = 0; j < v; ++j) {
        T p = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
        row[j] = (p - (j == y ? T(1) : T(0))) * inv_n;
      }
    }
  }
  return total / n;
}

}  // namespace

template <class T>
double Model<T>::eval_loss(const int32_t* tokens, const int32_t* targets,
                           int batch, int seq, ProbeCapture* capture) {
  forward_internal(tokens, batch, seq, capture);
  return cross_entropy(ws_->logits.data(), targets, batch * seq,
                       cfg_.vocab_size, false);
}

template <class T>
double Model<T>::loss_and_grads(const int32_t* tokens, const int32_t* targets,
                                int batch, int seq) {
  forward_internal(tokens, batch, seq, nullptr);
  Workspace& w = *ws_;
  int d = cfg_.d_model, D = cfg_.ffn_dim(), V = cfg_.vocab_size;
  int H = cfg_.n_heads, hd = cfg_.head_dim();
  int n = batch * seq;
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  double loss =
      cross_entropy(w.logits.data(), targets, n, V, true);  // logits -> dlogits
  T* dlogits = w.logits.data();

  // Output head and final norm.
  gemm_tn<T>(V, d, n, dlogits, V, w.xf.data(), d, grads_.lm_head.data(), d,
             true);
  std::vector<T>& dxf = w.ds;  // borrow scratch
  gemm_nn<T>(n, d, V, dlogits, V, params_.lm_head.data(), d, dxf.data(), d,
             false);
  const T* x_last = cfg_.n_layers == 0
                        ? w.x0.data()
                        : (layer_is_postln(cfg_.n_layers - 1)
                               ? w.layers[cfg_.n_layers - 1].xn_post.data()
                               : w.layers[cfg_.n_layers - 1].s2.data());
  fill_zero(w.dx);
  rmsnorm_bwd(x_last, w.inv_f.data(), params_.final_gain.data(), dxf.data(), n,
              d, w.dx.data(), grads_.final_gain.data());

  for (int li = cfg_.n_layers - 1; li >= 0; --li) {
    auto& P = params_.layers[li];
    auto& G = grads_.layers[li];
    auto& L = w.layers[li];
    bool post = layer_is_postln(li);
    const T* x_in = li == 0 ? w.x0.data()
                            : (layer_is_postln(li - 1)
                                   ? w.layers[li - 1].xn_post.data()
                                   : w.layers[li - 1].s2.data());
    const T* xm = post ? L.xm_post.data() : L.s1.data();
    const T* fin = post ? xm : L.n2.data();
    const T* ain = post ? x_in : L.n1.data();

    // FFN backward. w.dx holds dL/dx_next.
    T* ds2;
    if (post) {
      fill_zero(w.dxm);  // borrow as ds2 target
      rmsnorm_bwd(L.s2.data(), L.inv2.data(), P.ffn_gain.data(), w.dx.data(),
                  n, d, w.dxm.data(), G.ffn_gain.data());
      std::swap(w.dx, w.dxm);  // w.dx = ds2
    }
    ds2 = w.dx.data();
    // s2 = xm + fo; dfo = ds2.
    gemm_tn<T>(d, D, n, ds2, d, L.a.data(), D, G.w_out.data(), D, true);
    gemm_nn<T>(n, D, d, ds2, d, P.w_out.data(), D, w.da.data(), D, false);
    for (size_t i = 0; i < L.z.size(); ++i) {
      T zv = L.z[i] > T(0) ? L.z[i] : T(0);
      w.dz[i] = w.da[i] * T(2) * zv;
    }
    gemm_tn<T>(D, d, n, w.dz.data(), D, fin, d, G.w_in.data(), d, true);
    gemm_nn<T>(n, d, D, w.dz.data(), D, P.w_in.data(), d, w.dfin.data(), d,
               false);
    // dxm = ds2 (residual) + FFN-input path.
    std::memcpy(w.dxm.data(), ds2, sizeof(T) * static_cast<size_t>(n) * d);
    if (post) {
      for (int i = 0; i < n * d; ++i) w.dxm[i] += w.dfin[i];
    } else {
      rmsnorm_bwd(xm, L.inv2.data(), P.ffn_gain.data(), w.dfin.data(), n, d,
                  w.dxm.data(), G.ffn_gain.data());
    }

    // Attention backward.
    T* ds1;
    if (post) {
      fill_zero(w.dx);
      rmsnorm_bwd(L.s1.data(), L.inv1.data(), P.attn_gain.data(), w.dxm.data(),
                  n, d, w.dx.data(), G.attn_gain.data());
      ds1 = w.dx.data();
    } else {
      ds1 = w.dxm.data();
    }
    // s1 = x_in + ao; dao = ds1.
    gemm_tn<T>(d, d, n, ds1, d, L.ctx.data(), d, G.wo.data(), d, true);
    gemm_nn<T>(n, d, d, ds1, d, P.wo.data(), d, w.dctx.data(), d, false);

    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < H; ++h) {
        const T* pbh =
            L.probs.data() + (static_cast<size_t>(b) * H + h) * seq * seq;
        const T* qbh = L.qn.data() + static_cast<size_t>(b) * seq * d + h * hd;
        const T* kbh = L.kn.data() + static_cast<size_t>(b) * seq * d + h * hd;
        const T* vbh = L.v.data() + static_cast<size_t>(b) * seq * d + h * hd;
        const T* dcbh =
            w.dctx.data() + static_cast<size_t>(b) * seq * d + h * hd;
        T* dqbh = w.dq.data() + static_cast<size_t>(b) * seq * d + h * hd;
        T* dkbh = w.dk.data() + static_cast<size_t>(b) * seq * d + h * hd;
        T* dvbh = w.dv.data() + static_cast<size_t>(b) * seq * d + h * hd;

        gemm_nt<T>(seq, seq, hd, dcbh, d, vbh, d, w.dp_buf.data(), seq, false);
        gemm_tn<T>(seq, hd, seq, pbh, seq, dcbh, d, dvbh, d, false);
        for (int i = 0; i < seq; ++i) {
          const T* prow = pbh + static_cast<size_t>(i) * seq;
          const T* dprow = w.dp_buf.data() + static_cast<size_t>(i) * seq;
          T* dsrow = w.dscore_buf.data() + static_cast<size_t>(i) * seq;
          double hsum = 0.0;
          for (int j = 0; j <= i; ++j)
            hsum += static_cast<double>(dprow[j]) * prow[j];
          T hs = static_cast<T>(hsum);
          for (int j = 0; j <= i; ++j)
            dsrow[j] = prow[j] * (dprow[j] - hs) * scale;
          for (int j = i + 1; j < seq; ++j) dsrow[j] = T(0);
        }
        gemm_nn<T>(seq, hd, seq, w.dscore_buf.data(), seq, kbh, d, dqbh, d,
                   false);
        gemm_tn<T>(seq, hd, seq, w.dscore_buf.data(), seq, qbh, d, dkbh, d,
                   false);
      }

    // QK-norm and rotation, then the three projections.
    qknorm_bwd(L.q.data(), L.inv_q.data(), w.dq.data(), n, H, hd, d,
               w.dfin.data());
    std::swap(w.dq, w.dfin);
    qknorm_bwd(L.k.data(), L.inv_k.data(), w.dk.data(), n, H, hd, d,
               w.dfin.data());
    std::swap(w.dk, w.dfin);
    if (cfg_.use_rope) {
      rope_apply(w.dq.data(), n, seq, H, hd, d, rope_cos_.data(),
                 rope_sin_.data(), true);
      rope_apply(w.dk.data(), n, seq, H, hd, d, rope_cos_.data(),
                 rope_sin_.data(), true);
    }
    gemm_tn<T>(d, d, n, w.dq.data(), d, ain, d, G.wq.data(), d, true);
    gemm_tn<T>(d, d, n, w.dk.data(), d, ain, d, G.wk.data(), d, true);
    gemm_tn<T>(d, d, n, w.dv.data(), d, ain, d, G.wv.data(), d, true);
    T* dain = w.dfin.data();
    gemm_nn<T>(n, d, d, w.dq.data(), d, P.wq.data(), d, dain, d, false);
    gemm_nn<T>(n, d, d, w.dk.data(), d, P.wk.data(), d, dain, d, true);
    gemm_nn<T>(n, d, d, w.dv.data(), d, P.wv.data(), d, dain, d, true);

    // Combine into dL/dx_in: residual path ds1 plus attention-input path.
    if (post) {
      for (int i = 0; i < n * d; ++i) w.dx[i] = ds1[i] + dain[i];
    } else {
      if (w.dx.data() != ds1)
        std::memcpy(w.dx.data(), ds1, sizeof(T) * static_cast<size_t>(n) * d);
      rmsnorm_bwd(x_in, L.inv1.data(), P.attn_gain.data(), dain, n, d,
                  w.dx.data(), G.attn_gain.data());
    }
  }

  // Embedding scatter-add.
  for (int r = 0; r < n; ++r) {
    const T* src = w.dx.data() + static_cast<size_t>(r) * d;
    T* dst = grads_.embedding.data() +
             static_cast<size_t>(tokens[r]) * d;
    for (int j = 0; j < d; ++j) dst[j] += src[j];
  }
  return loss;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr uint64_t kMagic = 0x314241'4C434550'53ull;  // "SPECLAB1" LE
constexpr uint64_t kVersion = 1;

void write_u64(std::FILE* f, uint64_t v) {
  if (std::fwrite(&v, sizeof v, 1, f) != 1)
    throw std::runtime_error("checkpoint: short write");
}

void write_f64(std::FILE* f, double v) {
  if (std::fwrite(&v, sizeof v, 1, f) != 1)
    throw std::runtime_error("checkpoint: short write");
}

uint64_t read_u64(std::FILE* f) {
  uint64_t v = 0;
  if (std::fread(&v, sizeof v, 1, f) != 1)
    throw std::runtime_error("checkpoint: short read");
  return v;
}

double read_f64(std::FILE* f) {
  double v = 0;
  if (std::fread(&v, sizeof v, 1, f) != 1)
    throw std::runtime_error("checkpoint: short read");
  return v;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};

}  // namespace

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  const ModelConfig& c = m.config();
  write_u64(f.get(), kMagic);
  write_u64(f.get(), kVersion);
  write_u64(f.get(), static_cast<uint64_t>(c.n_layers));
  write_u64(f.get(), static_cast<uint64_t>(c.n_heads));
  write_u64(f.get(), static_cast<uint64_t>(c.d_model));
  write_u64(f.get(), static_cast<uint64_t>(c.ffn_mult));
  write_u64(f.get(), static_cast<uint64_t>(c.vocab_size));
  write_u64(f.get(), static_cast<uint64_t>(c.seq_len));
  write_u64(f.get(), c.use_rope ? 1 : 0);
  write_f64(f.get(), c.postln_frac);
  write_f64(f.get(), c.rope_base);
  write_u64(f.get(), c.seed);

  std::vector<ParamView<T>> views = const_cast<Model<T>&>(m).param_views();
  std::vector<float> buf;
  for (const auto& pv : views) {
    buf.resize(pv.size);
    for (size_t i = 0; i < pv.size; ++i) buf[i] = static_cast<float>(pv.data[i]);
    if (std::fwrite(buf.data(), sizeof(float), buf.size(), f.get()) !=
        buf.size())
      throw std::runtime_error("checkpoint: short write");
  }
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  if (read_u64(f.get()) != kMagic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (read_u64(f.get()) != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  ModelConfig c;
  c.n_layers = static_cast<int>(read_u64(f.get()));
  c.n_heads = static_cast<int>(read_u64(f.get()));
  c.d_model = static_cast<int>(read_u64(f.get()));
  c.ffn_mult = static_cast<int>(read_u64(f.get()));
  c.vocab_size = static_cast<int>(read_u64(f.get()));
  c.seq_len = static_cast<int>(read_u64(f.get()));
  c.use_rope = read_u64(f.get()) != 0;
  c.postln_frac = read_f64(f.get());
  c.rope_base = read_f64(f.get());
  c.seed = read_u64(f.get());

  Model<T> m(c);
  std::vector<float> buf;
  for (auto& pv : m.param_views()) {
    buf.resize(pv.size);
    if (std::fread(buf.data(), sizeof(float), buf.size(), f.get()) !=
        buf.size())
      throw std::runtime_error("checkpoint: truncated payload in " + path);
    for (size_t i = 0; i < pv.size; ++i) pv.data[i] = static_cast<T>(buf[i]);
  }
  return m;
}

template class Model<float>;
template class Model<double>;
template void save_checkpoint<float>(const Model<float>&, const std::string&);
template void save_checkpoint<double>(const Model<double>&, const std::string&);
template Model<float> load_checkpoint<float>(const std::string&);
template Model<double> load_checkpoint<double>(const std::string&);

}  // namespace speclab::model
