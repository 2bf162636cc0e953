// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration. Every artifact this file writes is a pure
// function of the config document: seeds are derived by hashing the run
// id, wall-clock time is never recorded, and floating-point work is
// single-threaded, so a rerun reproduces each file byte for byte.

#include "speclab/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "speclab/data.hpp"
#include "speclab/spectral.hpp"

namespace speclab::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

std::string format_scale(double s) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("short write to " + path);
}

}  // namespace

// body_out, when given, receives the label with any @x suffix stripped.
static OptimizerSpec parse_spec_with_body(const std::string& text,
                                          std::string* body_out) {
  OptimizerSpec spec;
  spec.label = text;
  std::string body = text;
  auto at = body.find("@x");
  if (at != std::string::npos) {
    std::string tail = body.substr(at + 2);
    body = body.substr(0, at);
    char* end = nullptr;
    double s = std::strtod(tail.c_str(), &end);
    if (tail.empty() || end != tail.c_str() + tail.size() || !(s > 0.0))
      fail("optimizer \"" + text + "\": bad learning-rate multiplier");
    spec.lr_scale = s;
  }
  if (body == "adamw") {
    spec.kind = optim::Kind::AdamW;
  } else if (body == "muon") {
    spec.kind = optim::Kind::Muon;
  } else if (body == "normuon") {
    spec.kind = optim::Kind::NorMuon;
  } else if (body == "dion") {
    spec.kind = optim::Kind::Dion;
  } else if (body.rfind("dion/", 0) == 0) {
    std::string tail = body.substr(5);
    char* end = nullptr;
    long n = std::strtol(tail.c_str(), &end, 10);
    if (tail.empty() || end != tail.c_str() + tail.size() || n < 1)
      fail("optimizer \"" + text + "\": bad rank divisor");
    spec.kind = optim::Kind::Dion;
    spec.has_rank = true;
    spec.rank_fraction = 1.0 / static_cast<double>(n);
  } else {
    fail("unknown optimizer \"" + text + "\"");
  }
  if (body_out) *body_out = body;
  return spec;
}

OptimizerSpec parse_optimizer_spec(const std::string& text) {
  return parse_spec_with_body(text, nullptr);
}

void TrainingConfig::validate() const {
  if (total_steps < 0) fail("training.total_steps: must be >= 0");
  if (batch_size < 1) fail("training.batch_size: must be >= 1");
  if (eval_tokens < 1) fail("training.eval_tokens: must be >= 1");
  if (log_every < 1) fail("training.log_every: must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    fail("training.val_fraction: must be in (0, 1)");
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
    optimizer.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  training.validate();
  if (training.eval_tokens < model.seq_len)
    fail("training.eval_tokens: smaller than one sequence");
  if (corpus_path.empty()) fail("corpus: path is required");
  parse_optimizer_spec(optimizer_name);
  if (has_sweep) {
    if (sweep.optimizers.empty()) fail("sweep.optimizers: must be nonempty");
    for (const auto& o : sweep.optimizers) parse_optimizer_spec(o);
    if (sweep.ffn_mult.empty()) fail("sweep.ffn_mult: must be nonempty");
    std::vector<int> m = sweep.ffn_mult;
    std::sort(m.begin(), m.end());
    for (size_t i = 0; i < m.size(); ++i) {
      if (m[i] < 1) fail("sweep.ffn_mult: entries must be >= 1");
      if (i && m[i] == m[i - 1]) fail("sweep.ffn_mult: duplicate entry");
    }
    if (sweep.lr_scale.empty()) fail("sweep.lr_scale: must be nonempty");
    for (double s : sweep.lr_scale)
      if (!(s > 0.0)) fail("sweep.lr_scale: entries must be > 0");
    if (sweep.n_heads.empty()) fail("sweep.n_heads: must be nonempty");
    for (int h : sweep.n_heads)
      if (h < 1) fail("sweep.n_heads: entries must be >= 1");
    if (sweep.use_rope.empty()) fail("sweep.use_rope: must be nonempty");
    if (sweep.postln_frac.empty()) fail("sweep.postln_frac: must be nonempty");
    for (double p : sweep.postln_frac)
      if (!(p >= 0.0 && p <= 1.0)) fail("sweep.postln_frac: must be in [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// JSON config parsing

namespace {

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) fail(ctx + ": unknown key \"" + it.key() + "\"");
  }
}

const json& need_object(const json& j, const std::string& ctx) {
  if (!j.is_object()) fail(ctx + ": expected an object");
  return j;
}

int64_t get_integer(const json& o, const std::string& ctx, const char* key,
                    int64_t def) {
  if (!o.contains(key)) return def;
  const json& v = o.at(key);
  if (!v.is_number_integer()) fail(ctx + "." + key + ": expected an integer");
  return v.get<int64_t>();
}

double get_double(const json& o, const std::string& ctx, const char* key,
                  double def) {
  if (!o.contains(key)) return def;
  const json& v = o.at(key);
  if (!v.is_number()) fail(ctx + "." + key + ": expected a number");
  return v.get<double>();
}

bool get_bool(const json& o, const std::string& ctx, const char* key,
              bool def) {
  if (!o.contains(key)) return def;
  const json& v = o.at(key);
  if (!v.is_boolean()) fail(ctx + "." + key + ": expected a boolean");
  return v.get<bool>();
}

std::string get_string(const json& o, const std::string& ctx, const char* key,
                       const std::string& def) {
  if (!o.contains(key)) return def;
  const json& v = o.at(key);
  if (!v.is_string()) fail(ctx + "." + key + ": expected a string");
  return v.get<std::string>();
}

template <class T, class Conv>
std::vector<T> get_array(const json& o, const std::string& ctx,
                         const char* key, std::vector<T> def, Conv conv) {
  if (!o.contains(key)) return def;
  const json& v = o.at(key);
  if (!v.is_array()) fail(ctx + "." + key + ": expected an array");
  std::vector<T> out;
  for (const json& e : v) out.push_back(conv(e, ctx + "." + key));
  return out;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(std::string("config: ") + e.what());
  }
  need_object(j, "config");
  check_keys(j, "config", {"schema_version", "model", "optimizer", "training",
                           "corpus", "out", "seed", "sweep"});
  if (!j.contains("schema_version")) fail("config: schema_version is required");
  if (!j.at("schema_version").is_number_integer() ||
      j.at("schema_version").get<int64_t>() != kSchemaVersion)
    fail("config: unsupported schema_version");

  ExperimentConfig cfg;

  if (j.contains("model")) {
    const json& m = need_object(j.at("model"), "model");
    check_keys(m, "model",
               {"n_layers", "n_heads", "d_model", "ffn_mult", "vocab_size",
                "seq_len", "use_rope", "postln_frac", "rope_base"});
    auto& mc = cfg.model;
    mc.n_layers = static_cast<int>(get_integer(m, "model", "n_layers", mc.n_layers));
    mc.n_heads = static_cast<int>(get_integer(m, "model", "n_heads", mc.n_heads));
    mc.d_model = static_cast<int>(get_integer(m, "model", "d_model", mc.d_model));
    mc.ffn_mult = static_cast<int>(get_integer(m, "model", "ffn_mult", mc.ffn_mult));
    mc.vocab_size =
        static_cast<int>(get_integer(m, "model", "vocab_size", mc.vocab_size));
    mc.seq_len = static_cast<int>(get_integer(m, "model", "seq_len", mc.seq_len));
    mc.use_rope = get_bool(m, "model", "use_rope", mc.use_rope);
    mc.postln_frac = get_double(m, "model", "postln_frac", mc.postln_frac);
    mc.rope_base = get_double(m, "model", "rope_base", mc.rope_base);
  }

  if (j.contains("optimizer")) {
    const json& o = need_object(j.at("optimizer"), "optimizer");
    check_keys(o, "optimizer",
               {"name", "lr", "scalar_lr", "weight_decay", "adamw_beta1",
                "adamw_beta2", "momentum", "rank_fraction", "ns_iterations",
                "epsilon", "lion_beta1", "lion_beta2"});
    cfg.optimizer_name = get_string(o, "optimizer", "name", cfg.optimizer_name);
    auto& oc = cfg.optimizer;
    oc.lr = get_double(o, "optimizer", "lr", oc.lr);
    oc.scalar_lr = get_double(o, "optimizer", "scalar_lr", oc.scalar_lr);
    oc.weight_decay = get_double(o, "optimizer", "weight_decay", oc.weight_decay);
    oc.adamw_beta1 = get_double(o, "optimizer", "adamw_beta1", oc.adamw_beta1);
    oc.adamw_beta2 = get_double(o, "optimizer", "adamw_beta2", oc.adamw_beta2);
    oc.momentum = get_double(o, "optimizer", "momentum", oc.momentum);
    oc.dion_rank_fraction =
        get_double(o, "optimizer", "rank_fraction", oc.dion_rank_fraction);
    oc.ns_iterations =
        static_cast<int>(get_integer(o, "optimizer", "ns_iterations", oc.ns_iterations));
    oc.epsilon = get_double(o, "optimizer", "epsilon", oc.epsilon);
    oc.lion_beta1 = get_double(o, "optimizer", "lion_beta1", oc.lion_beta1);
    oc.lion_beta2 = get_double(o, "optimizer", "lion_beta2", oc.lion_beta2);
  }

  // The label both names the cell and resolves the update rule; an @x
  // multiplier folds into the stored rates exactly once, here.
  OptimizerSpec spec = parse_optimizer_spec(cfg.optimizer_name);
  cfg.optimizer.kind = spec.kind;
  if (spec.has_rank) cfg.optimizer.dion_rank_fraction = spec.rank_fraction;
  cfg.optimizer.lr *= spec.lr_scale;
  cfg.optimizer.scalar_lr *= spec.lr_scale;

  if (j.contains("training")) {
    const json& t = need_object(j.at("training"), "training");
    check_keys(t, "training", {"total_steps", "batch_size", "eval_tokens",
                               "log_every", "val_fraction"});
    auto& tc = cfg.training;
    tc.total_steps = get_integer(t, "training", "total_steps", tc.total_steps);
    tc.batch_size =
        static_cast<int>(get_integer(t, "training", "batch_size", tc.batch_size));
    tc.eval_tokens = get_integer(t, "training", "eval_tokens", tc.eval_tokens);
    tc.log_every = get_integer(t, "training", "log_every", tc.log_every);
    tc.val_fraction = get_double(t, "training", "val_fraction", tc.val_fraction);
  }

  cfg.corpus_path = get_string(j, "config", "corpus", cfg.corpus_path);
  cfg.out_dir = get_string(j, "config", "out", cfg.out_dir);
  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_integer() || s.get<int64_t>() < 0)
      fail("config.seed: expected a nonnegative integer");
    cfg.seed = s.get<uint64_t>();
  }

  if (j.contains("sweep")) {
    const json& s = need_object(j.at("sweep"), "sweep");
    check_keys(s, "sweep", {"optimizers", "ffn_mult", "lr_scale", "n_heads",
                            "use_rope", "postln_frac"});
    if (!s.contains("optimizers")) fail("sweep.optimizers: is required");
    if (!s.contains("ffn_mult")) fail("sweep.ffn_mult: is required");
    cfg.has_sweep = true;
    auto as_int = [](const json& e, const std::string& ctx) {
      if (!e.is_number_integer()) fail(ctx + ": expected integers");
      return static_cast<int>(e.get<int64_t>());
    };
    auto as_double = [](const json& e, const std::string& ctx) {
      if (!e.is_number()) fail(ctx + ": expected numbers");
      return e.get<double>();
    };
    auto as_bool = [](const json& e, const std::string& ctx) {
      if (!e.is_boolean()) fail(ctx + ": expected booleans");
      return e.get<bool>();
    };
    auto as_string = [](const json& e, const std::string& ctx) {
      if (!e.is_string()) fail(ctx + ": expected strings");
      return e.get<std::string>();
    };
    cfg.sweep.optimizers = get_array<std::string>(s, "sweep", "optimizers", {}, as_string);
    cfg.sweep.ffn_mult = get_array<int>(s, "sweep", "ffn_mult", {}, as_int);
    cfg.sweep.lr_scale = get_array<double>(s, "sweep", "lr_scale", {1.0}, as_double);
    cfg.sweep.n_heads =
        get_array<int>(s, "sweep", "n_heads", {cfg.model.n_heads}, as_int);
    cfg.sweep.use_rope =
        get_array<bool>(s, "sweep", "use_rope", {cfg.model.use_rope}, as_bool);
    cfg.sweep.postln_frac = get_array<double>(s, "sweep", "postln_frac",
                                              {cfg.model.postln_frac}, as_double);
  }

  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path);
  return parse_experiment_config(read_file(path));
}

// out_dir is deliberately absent: where a run is written is not part of
// what it computes, so moving a sweep directory keeps records reusable.
std::string canonical_config_json(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["model"] = {{"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"d_model", cfg.model.d_model},
                {"ffn_mult", cfg.model.ffn_mult},
                {"vocab_size", cfg.model.vocab_size},
                {"seq_len", cfg.model.seq_len},
                {"use_rope", cfg.model.use_rope},
                {"postln_frac", cfg.model.postln_frac},
                {"rope_base", cfg.model.rope_base}};
  j["optimizer"] = {{"name", cfg.optimizer_name},
                    {"lr", cfg.optimizer.lr},
                    {"scalar_lr", cfg.optimizer.scalar_lr},
                    {"weight_decay", cfg.optimizer.weight_decay},
                    {"adamw_beta1", cfg.optimizer.adamw_beta1},
                    {"adamw_beta2", cfg.optimizer.adamw_beta2},
                    {"momentum", cfg.optimizer.momentum},
                    {"rank_fraction", cfg.optimizer.dion_rank_fraction},
                    {"ns_iterations", cfg.optimizer.ns_iterations},
                    {"epsilon", cfg.optimizer.epsilon},
                    {"lion_beta1", cfg.optimizer.lion_beta1},
                    {"lion_beta2", cfg.optimizer.lion_beta2}};
  j["training"] = {{"total_steps", cfg.training.total_steps},
                   {"batch_size", cfg.training.batch_size},
                   {"eval_tokens", cfg.training.eval_tokens},
                   {"log_every", cfg.training.log_every},
                   {"val_fraction", cfg.training.val_fraction}};
  j["corpus"] = cfg.corpus_path;
  j["seed"] = cfg.seed;
  return j.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_config_json(cfg))));
  return buf;
}

std::string arch_label(const model::ModelConfig& m) {
  std::string s = "h" + std::to_string(m.n_heads);
  if (!m.use_rope) s += "_nr";
  if (m.postln_frac != 0.0)
    s += "_pl" + std::to_string(static_cast<int>(std::lround(m.postln_frac * 100)));
  return s;
}

std::string run_id(const std::string& optimizer_label,
                   const model::ModelConfig& m) {
  std::string s;
  for (char c : optimizer_label) {
    if (c == '/' || c == '@')
      s += '-';
    else if (c == '.')
      s += 'p';
    else
      s += c;
  }
  return s + "_" + arch_label(m) + "_m" + std::to_string(m.ffn_mult);
}

// ---------------------------------------------------------------------------
// Checkpoint metrics

namespace {

constexpr const char* kProbeNames[2] = {"pre", "post"};
// Short names for default_alphas() = {0.5, 1, 1.5, 2, 3, 5}.
constexpr const char* kAlphaNames[6] = {"r05", "r1", "r15", "r2", "r3", "r5"};
constexpr int kRegimeSlots = 4;  // head, mid, tail, merged "agg"

data::Regime slot_regime(int s) { return static_cast<data::Regime>(s); }

void emit_profile(std::map<std::string, double>& out, const std::string& base,
                  const spectral::RankProfile& p) {
  out[base + "soft"] = p.soft;
  out[base + "hard"] = p.hard;
  out[base + "asym"] = p.asymmetry;
  for (int i = 0; i < 6; ++i) out[base + kAlphaNames[i]] = p.ranks[i];
}

// Flat "layer.probe.regime.metric" keys for one capture. probe slots: pre
// and post activations, their post/pre ratio ("rho"), and the positional
// symmetry ratio ("sym"). Regime "agg" merges head/mid/tail; "ht" holds the
// head-minus-tail delta-SR bias. Layer "mean" carries per-layer means of
// every metric all layers produced, plus "_om" ratios recomputed from the
// layer-mean ranks.
std::map<std::string, double> capture_metrics(model::ProbeCapture& cap) {
  const int L = cap.n_layers();
  std::map<std::string, double> out;
  for (int l = 0; l < L; ++l) {
    const std::string lp = std::to_string(l) + ".";
    std::array<std::array<std::optional<spectral::RankProfile>, kRegimeSlots>, 2> prof;
    for (int p = 0; p < 2; ++p) {
      for (int s = 0; s < kRegimeSlots; ++s) {
        spectral::CovAccumulator merged;
        const spectral::CovAccumulator* acc;
        if (s < 3) {
          acc = &cap.cov(l, p, slot_regime(s));
        } else {
          merged = cap.cov_agg(l, p);
          acc = &merged;
        }
        const std::string base = lp + kProbeNames[p] + "." + kRegimes[s] + ".";
        out[base + "n"] = static_cast<double>(acc->n);
        if (acc->n < 2) continue;
        spectral::EigenSpectrum spec = spectral::covariance_spectrum(*acc);
        if (spec.degenerate) {
          out[base + "degenerate"] = 1.0;
          continue;
        }
        spectral::RankProfile rp =
            spectral::rank_profile(spec, spectral::default_alphas());
        emit_profile(out, base, rp);
        prof[p][s] = std::move(rp);
      }
    }
    for (int s = 0; s < kRegimeSlots; ++s) {
      if (!prof[0][s] || !prof[1][s]) continue;
      const auto& pre = *prof[0][s];
      const auto& post = *prof[1][s];
      const std::string base = lp + "rho." + kRegimes[s] + ".";
      auto ratio = [&](const char* name, double a, double b) {
        if (a > 0.0) out[base + name] = spectral::reinjection_ratio(a, b);
      };
      ratio("soft", pre.soft, post.soft);
      ratio("hard", pre.hard, post.hard);
      for (int i = 0; i < 6; ++i) ratio(kAlphaNames[i], pre.ranks[i], post.ranks[i]);
    }
    std::array<std::optional<spectral::SymmetryStats>, kRegimeSlots> sym;
    for (int s = 0; s < kRegimeSlots; ++s) {
      const std::string base = lp + "sym." + kRegimes[s] + ".";
      try {
        spectral::SymmetryStats st;
        if (s < 3) {
          st.sr_pre = spectral::symmetry_ratio(cap.position(l, 0, slot_regime(s)));
          st.sr_post = spectral::symmetry_ratio(cap.position(l, 1, slot_regime(s)));
        } else {
          st.sr_pre = spectral::symmetry_ratio(cap.position_agg(l, 0));
          st.sr_post = spectral::symmetry_ratio(cap.position_agg(l, 1));
        }
        st.delta = st.sr_post - st.sr_pre;
        out[base + "pre"] = st.sr_pre;
        out[base + "post"] = st.sr_post;
        out[base + "dsr"] = st.delta;
        sym[s] = st;
      } catch (const std::exception&) {
        out[base + "degenerate"] = 1.0;
      }
    }
    if (sym[0] && sym[2])
      out[lp + "sym.ht.bias"] = spectral::head_tail_bias(*sym[0], *sym[2]);
  }

  if (L > 0) {
    std::map<std::string, double> means;
    const std::string first = "0.";
    for (const auto& [k, v] : out) {
      if (k.rfind(first, 0) != 0) continue;
      const std::string suffix = k.substr(first.size());
      double sum = v;
      bool all = true;
      for (int l = 1; l < L; ++l) {
        auto it = out.find(std::to_string(l) + "." + suffix);
        if (it == out.end()) {
          all = false;
          break;
        }
        sum += it->second;
      }
      if (all) means["mean." + suffix] = sum / L;
    }
    for (int s = 0; s < kRegimeSlots; ++s) {
      auto om = [&](const std::string& m) {
        auto pre = means.find(std::string("mean.pre.") + kRegimes[s] + "." + m);
        auto post = means.find(std::string("mean.post.") + kRegimes[s] + "." + m);
        if (pre != means.end() && post != means.end() && pre->second > 0.0)
          means[std::string("mean.rho.") + kRegimes[s] + "." + m + "_om"] =
              post->second / pre->second;
      };
      om("soft");
      om("hard");
      for (const char* a : kAlphaNames) om(a);
    }
    out.insert(means.begin(), means.end());
  }
  return out;
}

struct EvalOut {
  double loss = 0.0;
  int64_t tokens = 0;
  std::map<std::string, double> metrics;
};

EvalOut evaluate(model::Model<float>& mdl, const data::Corpus& corpus,
                 const data::FrequencyStrata& strata,
                 const ExperimentConfig& cfg) {
  const auto& mc = cfg.model;
  model::ProbeCapture capture(mc.n_layers, mc.ffn_dim(), mc.seq_len, &strata);
  EvalOut out;
  out.loss = capture_eval(mdl, corpus, strata, cfg.training.batch_size,
                          cfg.training.eval_tokens, &capture);
  const size_t avail = data::eval_window_count(corpus, mc.seq_len);
  const size_t budget = static_cast<size_t>(cfg.training.eval_tokens / mc.seq_len);
  out.tokens = static_cast<int64_t>(std::min(avail, budget)) * mc.seq_len;
  out.metrics = capture_metrics(capture);
  return out;
}

json checkpoint_json(const Checkpoint& ck) {
  json row;
  row["step"] = ck.step;
  row["lr"] = ck.lr;
  if (std::isnan(ck.train_loss))
    row["train_loss"] = nullptr;
  else
    row["train_loss"] = ck.train_loss;
  row["val_loss"] = ck.val_loss;
  row["ppl"] = ck.ppl;
  json m = json::object();
  for (const auto& [k, v] : ck.metrics) m[k] = v;
  row["metrics"] = std::move(m);
  return row;
}

json checkpoint_jsonl_row(const Checkpoint& ck) {
  json row;
  row["step"] = ck.step;
  row["lr"] = ck.lr;
  if (std::isnan(ck.train_loss))
    row["train_loss"] = nullptr;
  else
    row["train_loss"] = ck.train_loss;
  row["val_loss"] = ck.val_loss;
  row["ppl"] = ck.ppl;
  for (const auto& [k, v] : ck.metrics) row[k] = v;
  return row;
}

Checkpoint checkpoint_from_json(const json& row) {
  Checkpoint ck;
  ck.step = row.at("step").get<int64_t>();
  ck.lr = row.at("lr").get<double>();
  const json& tl = row.at("train_loss");
  ck.train_loss = tl.is_null() ? std::nan("") : tl.get<double>();
  ck.val_loss = row.at("val_loss").get<double>();
  ck.ppl = row.at("ppl").get<double>();
  if (row.contains("metrics"))
    for (auto it = row.at("metrics").begin(); it != row.at("metrics").end(); ++it)
      ck.metrics[it.key()] = it.value().get<double>();
  return ck;
}

}  // namespace

double capture_eval(model::Model<float>& m, const data::Corpus& corpus,
                    const data::FrequencyStrata& strata, int batch_size,
                    int64_t eval_tokens, model::ProbeCapture* capture) {
  const int seq_len = m.config().seq_len;
  const size_t avail = data::eval_window_count(corpus, seq_len);
  const size_t budget = static_cast<size_t>(eval_tokens / seq_len);
  const size_t n_windows = std::min(avail, budget);
  if (n_windows == 0)
    fail("eval: validation region shorter than one window");
  double sum = 0.0;
  for (size_t first = 0; first < n_windows;
       first += static_cast<size_t>(batch_size)) {
    const int n = static_cast<int>(
        std::min<size_t>(static_cast<size_t>(batch_size), n_windows - first));
    data::Batch b = data::eval_batch(corpus, strata, first, n, seq_len);
    sum += m.eval_loss(b.tokens.data(), b.targets.data(), n, seq_len, capture) * n;
  }
  return sum / static_cast<double>(n_windows);
}

std::string run_record_json(const RunRecord& rec) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["id"] = rec.id;
  j["optimizer"] = rec.optimizer_label;
  j["architecture"] = rec.architecture;
  j["ffn_mult"] = rec.ffn_mult;
  j["d_model"] = rec.d_model;
  j["status"] = rec.status;
  if (rec.status == "diverged") {
    j["diverged_at"] = rec.diverged_at;
    j["error"] = rec.error;
  }
  j["eval_tokens_used"] = rec.eval_tokens_used;
  j["config_hash"] = rec.hash;
  json cks = json::array();
  for (const auto& ck : rec.checkpoints) cks.push_back(checkpoint_json(ck));
  j["checkpoints"] = std::move(cks);
  return j.dump(2);
}

RunRecord parse_run_record(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(std::string("run record: ") + e.what());
  }
  RunRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
    rec.optimizer_label = j.at("optimizer").get<std::string>();
    rec.architecture = j.at("architecture").get<std::string>();
    rec.ffn_mult = j.at("ffn_mult").get<int>();
    rec.d_model = j.at("d_model").get<int>();
    rec.status = j.at("status").get<std::string>();
    if (j.contains("diverged_at")) rec.diverged_at = j.at("diverged_at").get<int64_t>();
    if (j.contains("error")) rec.error = j.at("error").get<std::string>();
    rec.eval_tokens_used = j.at("eval_tokens_used").get<int64_t>();
    rec.hash = j.at("config_hash").get<std::string>();
    for (const json& row : j.at("checkpoints"))
      rec.checkpoints.push_back(checkpoint_from_json(row));
  } catch (const json::exception& e) {
    fail(std::string("run record: ") + e.what());
  }
  return rec;
}

RunRecord run_single(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  // The label is authoritative for the update rule; kind and rank are
  // re-derived so hand-built configs behave like parsed ones. Multipliers
  // are not re-applied: they fold into lr when the label is composed.
  OptimizerSpec spec = parse_optimizer_spec(cfg.optimizer_name);
  cfg.optimizer.kind = spec.kind;
  if (spec.has_rank) cfg.optimizer.dion_rank_fraction = spec.rank_fraction;
  cfg.validate();

  const std::string id = run_id(cfg.optimizer_name, cfg.model);
  const std::string hash = config_hash(cfg);
  cfg.model.seed = cfg.seed ^ fnv1a64(id + "#model");
  cfg.optimizer.seed = cfg.seed ^ fnv1a64(id + "#opt");
  const uint64_t data_seed = cfg.seed ^ fnv1a64(id + "#data");

  if (!fs::exists(cfg.corpus_path))
    throw IoError("corpus not found: " + cfg.corpus_path);
  data::Corpus corpus;
  try {
    corpus = data::load_corpus(cfg.corpus_path, cfg.training.val_fraction);
  } catch (const std::exception& e) {
    throw IoError(std::string("corpus: ") + e.what());
  }
  const auto& mc = cfg.model;
  if (corpus.train_len < static_cast<size_t>(mc.seq_len) + 2)
    throw ConfigError("corpus: training region shorter than one window");
  if (data::eval_window_count(corpus, mc.seq_len) == 0)
    throw ConfigError("corpus: validation region shorter than one window");
  const data::FrequencyTable table =
      data::build_frequency_table(corpus.bytes.data(), corpus.train_len, mc.vocab_size);
  const data::FrequencyStrata strata = data::stratify(table);

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create " + cfg.out_dir + ": " + ec.message());
  {
    json meta;
    meta["id"] = id;
    meta["config_hash"] = hash;
    meta["config"] = json::parse(canonical_config_json(cfg));
    write_file(cfg.out_dir + "/config.json", meta.dump(2) + "\n");
  }
  std::ofstream mjs(cfg.out_dir + "/metrics.jsonl",
                    std::ios::binary | std::ios::trunc);
  if (!mjs) throw IoError("cannot write " + cfg.out_dir + "/metrics.jsonl");

  model::Model<float> mdl(cfg.model);
  auto pviews = mdl.param_views();
  auto gviews = mdl.grad_views();
  optim::Optimizer opt(cfg.optimizer, pviews);
  linalg::Rng data_rng(data_seed);

  RunRecord rec;
  rec.id = id;
  rec.optimizer_label = cfg.optimizer_name;
  rec.architecture = arch_label(cfg.model);
  rec.ffn_mult = mc.ffn_mult;
  rec.d_model = mc.d_model;
  rec.status = "complete";
  rec.hash = hash;

  const int64_t total = cfg.training.total_steps;
  double since_sum = 0.0;
  int64_t since_n = 0;
  int64_t progress = 0;  // completed optimizer steps

  auto checkpoint_at = [&](int64_t step) {
    EvalOut ev = evaluate(mdl, corpus, strata, cfg);
    Checkpoint ck;
    ck.step = step;
    ck.lr = optim::lr_schedule(step, total, cfg.optimizer.lr);
    ck.train_loss = since_n ? since_sum / static_cast<double>(since_n)
                            : std::nan("");
    ck.val_loss = ev.loss;
    ck.ppl = std::exp(ev.loss);
    ck.metrics = std::move(ev.metrics);
    rec.eval_tokens_used = ev.tokens;
    mjs << checkpoint_jsonl_row(ck).dump() << "\n";
    mjs.flush();
    model::save_checkpoint(mdl, cfg.out_dir + "/last.ckpt");
    rec.checkpoints.push_back(std::move(ck));
    since_sum = 0.0;
    since_n = 0;
  };

  try {
    checkpoint_at(0);
    for (int64_t t = 0; t < total; ++t) {
      data::Batch b = data::sample_batch(data_rng, corpus, strata,
                                         cfg.training.batch_size, mc.seq_len);
      mdl.zero_grads();
      const double loss = mdl.loss_and_grads(b.tokens.data(), b.targets.data(),
                                             cfg.training.batch_size, mc.seq_len);
      if (!std::isfinite(loss))
        throw std::runtime_error("non-finite training loss at step " +
                                 std::to_string(t));
      opt.step(pviews, gviews, optim::lr_schedule(t, total, cfg.optimizer.lr));
      progress = t + 1;
      since_sum += loss;
      ++since_n;
      if (progress % cfg.training.log_every == 0 && progress != total)
        checkpoint_at(progress);
    }
    if (total > 0) checkpoint_at(total);
  } catch (const ConfigError&) {
    throw;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    // Numeric blowups land here: the record keeps every checkpoint that
    // finished, and last.ckpt still holds the weights from the newest one.
    rec.status = "diverged";
    rec.diverged_at = progress;
    rec.error = e.what();
  }

  if (rec.status == "complete") {
    fs::rename(cfg.out_dir + "/last.ckpt", cfg.out_dir + "/final.ckpt", ec);
    if (ec) throw IoError("cannot finalize checkpoint: " + ec.message());
  }
  write_file(cfg.out_dir + "/run_record.json", run_record_json(rec) + "\n");
  return rec;
}

// ---------------------------------------------------------------------------
// Sweeps

size_t cell_count(const ExperimentConfig& sweep) {
  if (!sweep.has_sweep) return 0;
  const auto& s = sweep.sweep;
  return s.optimizers.size() * s.lr_scale.size() * s.n_heads.size() *
         s.use_rope.size() * s.postln_frac.size() * s.ffn_mult.size();
}

ExperimentConfig cell_config(const ExperimentConfig& sweep, size_t index) {
  if (!sweep.has_sweep) fail("cell_config: config has no sweep axes");
  const auto& s = sweep.sweep;
  const size_t n = cell_count(sweep);
  if (index >= n) fail("cell_config: index out of range");
  const size_t i_m = index % s.ffn_mult.size();
  index /= s.ffn_mult.size();
  const size_t i_p = index % s.postln_frac.size();
  index /= s.postln_frac.size();
  const size_t i_r = index % s.use_rope.size();
  index /= s.use_rope.size();
  const size_t i_h = index % s.n_heads.size();
  index /= s.n_heads.size();
  const size_t i_s = index % s.lr_scale.size();
  index /= s.lr_scale.size();
  const size_t i_o = index;

  ExperimentConfig c = sweep;
  c.has_sweep = false;
  c.sweep = SweepAxes{};
  c.model.ffn_mult = s.ffn_mult[i_m];
  c.model.postln_frac = s.postln_frac[i_p];
  c.model.use_rope = s.use_rope[i_r];
  c.model.n_heads = s.n_heads[i_h];

  std::string body;
  OptimizerSpec spec = parse_spec_with_body(s.optimizers[i_o], &body);
  const double scale = spec.lr_scale * s.lr_scale[i_s];
  c.optimizer_name = scale != 1.0 ? body + "@x" + format_scale(scale) : body;
  c.optimizer.kind = spec.kind;
  if (spec.has_rank) c.optimizer.dion_rank_fraction = spec.rank_fraction;
  c.optimizer.lr = sweep.optimizer.lr * scale;
  c.optimizer.scalar_lr = sweep.optimizer.scalar_lr * scale;
  c.out_dir = sweep.out_dir + "/runs/" + run_id(c.optimizer_name, c.model);
  return c;
}

SweepResult run_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!cfg.has_sweep) fail("sweep: config has no sweep block");
  const size_t n = cell_count(cfg);

  std::vector<ExperimentConfig> cells;
  std::vector<std::string> ids;
  for (size_t i = 0; i < n; ++i) {
    cells.push_back(cell_config(cfg, i));
    ids.push_back(run_id(cells.back().optimizer_name, cells.back().model));
    for (size_t k = 0; k + 1 < cells.size(); ++k)
      if (ids[k] == ids.back())
        fail("sweep: axes produce duplicate cell \"" + ids.back() + "\"");
  }

  std::error_code ec;
  fs::create_directories(cfg.out_dir + "/runs", ec);
  if (ec) throw IoError("cannot create " + cfg.out_dir + ": " + ec.message());

  SweepResult res;
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["seed"] = cfg.seed;
  manifest["axes"] = {{"optimizers", cfg.sweep.optimizers},
                      {"ffn_mult", cfg.sweep.ffn_mult},
                      {"lr_scale", cfg.sweep.lr_scale},
                      {"n_heads", cfg.sweep.n_heads},
                      {"use_rope", cfg.sweep.use_rope},
                      {"postln_frac", cfg.sweep.postln_frac}};
  json runs = json::array();

  for (size_t i = 0; i < n; ++i) {
    const ExperimentConfig& cell = cells[i];
    const std::string& id = ids[i];
    const std::string hash = config_hash(cell);
    std::string status;
    bool reused = false;
    const std::string record_path = cell.out_dir + "/run_record.json";
    if (fs::exists(record_path)) {
      try {
        RunRecord old = parse_run_record(read_file(record_path));
        if (old.hash == hash && old.id == id) {
          status = old.status;
          reused = true;
        }
      } catch (const std::exception&) {
        // stale or corrupt record: rerun the cell
      }
    }
    if (!reused) {
      status = run_single(cell).status;
      ++res.executed;
    } else {
      ++res.reused;
    }
    if (status == "diverged") ++res.diverged;
    res.run_ids.push_back(id);
    res.status[id] = status;
    runs.push_back({{"id", id}, {"status", status}, {"config_hash", hash}});
    manifest["runs"] = runs;
    write_file(cfg.out_dir + "/sweep_manifest.json", manifest.dump(2) + "\n");
  }

  write_fit_grid(cfg.out_dir);
  return res;
}

std::vector<RunSummary> load_sweep_runs(const std::string& sweep_dir) {
  std::vector<RunSummary> out;
  const fs::path runs = fs::path(sweep_dir) / "runs";
  if (!fs::exists(runs)) return out;
  for (const auto& entry : fs::directory_iterator(runs)) {
    if (!entry.is_directory()) continue;
    const fs::path rr = entry.path() / "run_record.json";
    if (!fs::exists(rr)) continue;
    try {
      out.push_back(RunSummary{parse_run_record(read_file(rr.string()))});
    } catch (const std::exception&) {
      // unreadable record: treat the run as absent
    }
  }
  std::sort(out.begin(), out.end(), [](const RunSummary& a, const RunSummary& b) {
    return a.record.id < b.record.id;
  });
  return out;
}

std::vector<FitRow> fit_grid(const std::vector<RunSummary>& runs) {
  std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) {
    if (!r.complete() || r.record.checkpoints.empty()) continue;
    groups[{r.record.optimizer_label, r.record.architecture}].push_back(&r.record);
  }
  std::vector<FitRow> rows;
  for (auto& [key, recs] : groups) {
    std::sort(recs.begin(), recs.end(), [](const RunRecord* a, const RunRecord* b) {
      return a->ffn_mult < b->ffn_mult;
    });
    for (const char* regime : kRegimes) {
      for (const char* metric : kFitMetrics) {
        const std::string mkey =
            std::string("mean.post.") + regime + "." + metric;
        std::vector<double> widths, ranks;
        for (const RunRecord* rec : recs) {
          const auto& m = rec->checkpoints.back().metrics;
          auto it = m.find(mkey);
          if (it == m.end()) continue;
          const double v = it->second;
          if (!(std::isfinite(v) && v > 0.0)) continue;
          const double d = static_cast<double>(rec->ffn_mult) * rec->d_model;
          if (!widths.empty() && widths.back() == d) continue;
          widths.push_back(d);
          ranks.push_back(v);
        }
        if (widths.size() < 2) continue;
        FitRow row;
        row.optimizer = key.first;
        row.architecture = key.second;
        row.regime = regime;
        row.metric = metric;
        row.fit = fit::fit_power_law(widths, ranks);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

void write_fit_grid(const std::string& sweep_dir) {
  const std::vector<FitRow> rows = fit_grid(load_sweep_runs(sweep_dir));
  std::ostringstream csv;
  csv << "optimizer,architecture,regime,metric,beta,r2,stderr\n";
  for (const auto& r : rows) {
    csv << r.optimizer << "," << r.architecture << "," << r.regime << ","
        << r.metric << "," << format_double(r.fit.beta) << ","
        << format_double(r.fit.r2) << "," << format_double(r.fit.stderr_beta)
        << "\n";
  }
  write_file(sweep_dir + "/fit_grid.csv", csv.str());
}

}  // namespace speclab::experiment
