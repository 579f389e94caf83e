// pipeline.hpp - Calibration statistics and the toy decoder model.
//
// The model is a pre-norm decoder: embedding + sinusoidal positions,
// n_layers blocks of (RMS-norm, multi-head causal attention, residual,
// RMS-norm, GELU MLP, residual), a final RMS-norm, and tied-embedding
// logits. Attention internals stay FP32; only the six linear projections
// per block are quantized in the quantized variant.

#ifndef LBQ_PIPELINE_HPP
#define LBQ_PIPELINE_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lbq/container.hpp"
#include "lbq/error.hpp"
#include "lbq/qgemm.hpp"
#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"
#include "lbq/transforms.hpp"

namespace lbq {

inline constexpr int kEndOfSequence = 0;
inline constexpr double kNormEps = 1e-6;

struct ToyModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab < 2 || d_model == 0 || n_layers == 0 || n_heads == 0 ||
        d_ff == 0 || max_seq == 0) {
      throw ConfigError("toy model config has a zero-sized field");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model must be divisible by n_heads");
    }
    if (d_model % 2 != 0 || d_ff % 2 != 0) {
      throw ConfigError("d_model and d_ff must have a power-of-two factor >= 2");
    }
  }
};

// Canonical linear-projection names: "layer{i}.attn_q" etc.
inline const char* kLinearKinds[6] = {"attn_q", "attn_k", "attn_v",
                                      "attn_o", "mlp_up", "mlp_down"};

inline std::string linear_name(std::size_t layer, const char* kind) {
  return "layer" + std::to_string(layer) + "." + kind;
}

inline std::vector<std::string> toy_linear_names(std::size_t n_layers) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < n_layers; ++l)
    for (const char* k : kLinearKinds) names.push_back(linear_name(l, k));
  return names;
}

// Called with each linear layer's input activations during an FP32
// forward; this is how calibration sees the model.
using ActObserver = std::function<void(const std::string&, const Tensor&)>;

namespace detail {

inline void check_tokens(const std::vector<int>& tokens,
                         const ToyModelConfig& cfg) {
  if (tokens.empty()) throw InputError("token sequence must be non-empty");
  if (tokens.size() > cfg.max_seq) {
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw InputError("token id " + std::to_string(t) + " out of range");
    }
  }
}

inline Tensor embed_with_positions(const Tensor& embedding,
                                   const std::vector<int>& tokens) {
  const std::size_t t_len = tokens.size(), d = embedding.cols();
  Tensor x({t_len, d});
  for (std::size_t i = 0; i < t_len; ++i) {
    const float* row = embedding.data() + static_cast<std::size_t>(tokens[i]) * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double angle =
          static_cast<double>(i) *
          std::exp(-std::log(10000.0) *
                   static_cast<double>(j - (j % 2)) / static_cast<double>(d));
      const double pe = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
      x.at(i, j) = row[j] + static_cast<float>(pe);
    }
  }
  return x;
}

inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  Tensor y({x.rows(), x.cols()});
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = x.at(i, j);
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      y.at(i, j) = static_cast<float>(x.at(i, j) * inv) * gain[j];
    }
  }
  return y;
}

inline Tensor causal_attention(const Tensor& q, const Tensor& k,
                               const Tensor& v, std::size_t n_heads) {
  const std::size_t t_len = q.rows(), d = q.cols(), dh = d / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({t_len, d});
  std::vector<double> scores;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < t_len; ++i) {
      scores.assign(i + 1, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          dot += static_cast<double>(q.at(i, off + c)) *
                 static_cast<double>(k.at(j, off + c));
        }
        scores[j] = dot * inv_sqrt_dh;
        if (scores[j] > mx) mx = scores[j];
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          acc += scores[j] * static_cast<double>(v.at(j, off + c));
        }
        out.at(i, off + c) = static_cast<float>(acc / z);
      }
    }
  }
  return out;
}

inline void gelu_inplace(Tensor& x) {
  const double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < x.elems(); ++i) {
    const double v = x[i];
    x[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
}

// Shared block structure for both model variants. `Model` provides
// config, embedding, per-layer norms, and apply_linear.
template <typename Model>
Tensor decoder_forward(const Model& model, const std::vector<int>& tokens,
                       const ActObserver* observer) {
  const ToyModelConfig& cfg = model.config;
  check_tokens(tokens, cfg);
  Tensor x = embed_with_positions(model.embedding, tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Tensor h = rms_norm(x, model.attn_norm(l));
    Tensor q = model.apply_linear(l, "attn_q", h, observer);
    Tensor k = model.apply_linear(l, "attn_k", h, observer);
    Tensor v = model.apply_linear(l, "attn_v", h, observer);
    Tensor attn = causal_attention(q, k, v, cfg.n_heads);
    Tensor o = model.apply_linear(l, "attn_o", attn, observer);
    for (std::size_t i = 0; i < x.elems(); ++i) x[i] += o[i];

    Tensor h2 = rms_norm(x, model.mlp_norm(l));
    Tensor up = model.apply_linear(l, "mlp_up", h2, observer);
    gelu_inplace(up);
    Tensor down = model.apply_linear(l, "mlp_down", up, observer);
    for (std::size_t i = 0; i < x.elems(); ++i) x[i] += down[i];
  }
  Tensor xf = rms_norm(x, model.final_norm);

  // Tied-embedding logits: logits[i, t] = xf[i] . embedding[t].
  const std::size_t t_len = tokens.size(), d = cfg.d_model;
  Tensor logits({t_len, cfg.vocab});
  for (std::size_t i = 0; i < t_len; ++i) {
    for (std::size_t t = 0; t < cfg.vocab; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        acc += static_cast<double>(xf.at(i, j)) *
               static_cast<double>(model.embedding.at(t, j));
      }
      logits.at(i, t) = static_cast<float>(acc);
    }
  }
  return logits;
}

}  // namespace detail

// FP32 reference model.
struct ToyModel {
  ToyModelConfig config;
  Tensor embedding;  // vocab x d_model
  struct Layer {
    Tensor attn_norm, mlp_norm;  // gains, length d_model
    Tensor attn_q, attn_k, attn_v, attn_o;  // d_model x d_model
    Tensor mlp_up;    // d_model x d_ff
    Tensor mlp_down;  // d_ff x d_model
  };
  std::vector<Layer> layers;
  Tensor final_norm;

  const Tensor& attn_norm(std::size_t l) const { return layers[l].attn_norm; }
  const Tensor& mlp_norm(std::size_t l) const { return layers[l].mlp_norm; }

  const Tensor& linear_weight(std::size_t l, const std::string& kind) const {
    const Layer& L = layers[l];
    if (kind == "attn_q") return L.attn_q;
    if (kind == "attn_k") return L.attn_k;
    if (kind == "attn_v") return L.attn_v;
    if (kind == "attn_o") return L.attn_o;
    if (kind == "mlp_up") return L.mlp_up;
    if (kind == "mlp_down") return L.mlp_down;
    throw ConfigError("unknown linear kind '" + kind + "'");
  }
  Tensor& linear_weight(std::size_t l, const std::string& kind) {
    return const_cast<Tensor&>(
        static_cast<const ToyModel*>(this)->linear_weight(l, kind));
  }

  Tensor apply_linear(std::size_t l, const char* kind, const Tensor& in,
                      const ActObserver* observer) const {
    if (observer && *observer) (*observer)(linear_name(l, kind), in);
    return matmul_ref(in, linear_weight(l, kind));
  }

  Tensor forward(const std::vector<int>& tokens,
                 const ActObserver* observer = nullptr) const {
    return detail::decoder_forward(*this, tokens, observer);
  }

  // Seeded Gaussian init, weight std 1/sqrt(in_features), norm gains 1.
  // outlier_channels > 0 scales that many input channels (weight rows)
  // of every linear by outlier_factor, reproducing the heavy-tailed
  // channel regime the preprocessing transforms exist to fix.
  static ToyModel random(const ToyModelConfig& cfg,
                         std::size_t outlier_channels = 0,
                         float outlier_factor = 10.0f) {
    cfg.validate();
    ToyModel m;
    m.config = cfg;
    SplitMix64 rng(cfg.seed);
    SplitMix64 outlier_rng(cfg.seed ^ 0x6f75746c69657273ULL);

    auto gaussian = [&rng](std::vector<std::size_t> shape, double std_dev) {
      Tensor t(shape);
      for (std::size_t i = 0; i < t.elems(); ++i) {
        t[i] = static_cast<float>(rng.next_normal() * std_dev);
      }
      return t;
    };
    auto ones = [](std::size_t n) {
      Tensor t({n});
      for (std::size_t i = 0; i < n; ++i) t[i] = 1.0f;
      return t;
    };
    auto inject = [&](Tensor& w) {
      if (outlier_channels == 0) return;
      const std::size_t rows = w.rows();
      std::set<std::size_t> chosen;
      while (chosen.size() < std::min(outlier_channels, rows)) {
        chosen.insert(outlier_rng.next_below(rows));
      }
      for (std::size_t r : chosen) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
          w.at(r, c) *= outlier_factor;
        }
      }
    };

    m.embedding = gaussian({cfg.vocab, cfg.d_model}, 1.0);
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double down_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      Layer L;
      L.attn_norm = ones(cfg.d_model);
      L.mlp_norm = ones(cfg.d_model);
      L.attn_q = gaussian({cfg.d_model, cfg.d_model}, attn_std);
      L.attn_k = gaussian({cfg.d_model, cfg.d_model}, attn_std);
      L.attn_v = gaussian({cfg.d_model, cfg.d_model}, attn_std);
      L.attn_o = gaussian({cfg.d_model, cfg.d_model}, attn_std);
      L.mlp_up = gaussian({cfg.d_model, cfg.d_ff}, attn_std);
      L.mlp_down = gaussian({cfg.d_ff, cfg.d_model}, down_std);
      inject(L.attn_q);
      inject(L.attn_k);
      inject(L.attn_v);
      inject(L.attn_o);
      inject(L.mlp_up);
      inject(L.mlp_down);
      m.layers.push_back(std::move(L));
    }
    m.final_norm = ones(cfg.d_model);
    return m;
  }
};

// Running per-layer activation absmax collected over calibration batches.
struct CalibrationStats {
  struct LayerStats {
    std::vector<float> channel_absmax;  // per input channel
    float tensor_absmax = 0.0f;
    std::size_t samples = 0;  // activation rows observed
  };
  std::map<std::string, LayerStats> layers;

  void observe(const std::string& name, const Tensor& input) {
    LayerStats& ls = layers[name];
    if (ls.channel_absmax.empty()) ls.channel_absmax.assign(input.cols(), 0.0f);
    if (ls.channel_absmax.size() != input.cols()) {
      throw ConfigError("calibration: channel count changed for layer " + name);
    }
    for (std::size_t i = 0; i < input.rows(); ++i) {
      for (std::size_t j = 0; j < input.cols(); ++j) {
        const float a = std::fabs(input.at(i, j));
        if (a > ls.channel_absmax[j]) ls.channel_absmax[j] = a;
        if (a > ls.tensor_absmax) ls.tensor_absmax = a;
      }
    }
    ls.samples += input.rows();
  }

  // Elementwise-max semilattice join; sample counts add.
  void merge(const CalibrationStats& other) {
    for (const auto& [name, ols] : other.layers) {
      auto it = layers.find(name);
      if (it == layers.end()) {
        layers[name] = ols;
        continue;
      }
      LayerStats& ls = it->second;
      if (ls.channel_absmax.size() != ols.channel_absmax.size()) {
        throw ConfigError("calibration merge: channel count mismatch for " + name);
      }
      for (std::size_t j = 0; j < ls.channel_absmax.size(); ++j) {
        ls.channel_absmax[j] = std::max(ls.channel_absmax[j], ols.channel_absmax[j]);
      }
      ls.tensor_absmax = std::max(ls.tensor_absmax, ols.tensor_absmax);
      ls.samples += ols.samples;
    }
  }
};

// Seeded random sequences over the non-terminal vocabulary, used both
// as calibration data and as evaluation prompts.
inline std::vector<std::vector<int>> random_sequences(std::uint64_t seed,
                                                      std::size_t count,
                                                      std::size_t len,
                                                      std::size_t vocab) {
  if (count == 0 || len == 0) {
    throw ConfigError("random_sequences: count and len must be positive");
  }
  if (vocab < 2) throw ConfigError("random_sequences: vocab must be at least 2");
  SplitMix64 rng(seed);
  std::vector<std::vector<int>> seqs(count);
  for (std::vector<int>& s : seqs) {
    s.resize(len);
    for (int& t : s) {
      t = static_cast<int>(1 + rng.next_below(vocab - 1));
    }
  }
  return seqs;
}

inline CalibrationStats calibrate(const ToyModel& model,
                                  const std::vector<std::vector<int>>& batches) {
  if (batches.empty()) throw InputError("calibrate: empty batch set");
  CalibrationStats stats;
  ActObserver obs = [&stats](const std::string& name, const Tensor& input) {
    stats.observe(name, input);
  };
  for (const std::vector<int>& batch : batches) {
    (void)model.forward(batch, &obs);
  }
  return stats;
}

enum class QuantMode { W8A8, W4A8, TransformOnly };

inline const char* quant_mode_name(QuantMode m) {
  switch (m) {
    case QuantMode::W8A8: return "w8a8";
    case QuantMode::W4A8: return "w4a8";
    case QuantMode::TransformOnly: return "transform_only";
  }
  return "?";
}

struct QuantizeModelOptions {
  std::optional<float> smooth_alpha;  // engaged when set
  bool hadamard = false;
  std::set<std::string> hadamard_layers;  // empty = every linear
  std::size_t group_size = 0;  // w4a8: 0 = per-channel, else per-group
  bool static_acts = false;    // per-tensor static activation scales
};

// Quantized counterpart with identical topology; only the linear-layer
// weights change representation.
struct QuantizedToyModel {
  ToyModelConfig config;
  QuantMode mode = QuantMode::W8A8;
  QuantizeModelOptions options;
  Tensor embedding;
  struct Layer {
    Tensor attn_norm, mlp_norm;
    QLinearLayer attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down;
  };
  std::vector<Layer> layers;
  Tensor final_norm;

  const Tensor& attn_norm(std::size_t l) const { return layers[l].attn_norm; }
  const Tensor& mlp_norm(std::size_t l) const { return layers[l].mlp_norm; }

  const QLinearLayer& linear(std::size_t l, const std::string& kind) const {
    const Layer& L = layers[l];
    if (kind == "attn_q") return L.attn_q;
    if (kind == "attn_k") return L.attn_k;
    if (kind == "attn_v") return L.attn_v;
    if (kind == "attn_o") return L.attn_o;
    if (kind == "mlp_up") return L.mlp_up;
    if (kind == "mlp_down") return L.mlp_down;
    throw ConfigError("unknown linear kind '" + kind + "'");
  }
  QLinearLayer& linear(std::size_t l, const std::string& kind) {
    return const_cast<QLinearLayer&>(
        static_cast<const QuantizedToyModel*>(this)->linear(l, kind));
  }

  Tensor apply_linear(std::size_t l, const char* kind, const Tensor& in,
                      const ActObserver*) const {
    return qlinear_forward(linear(l, kind), in);
  }

  Tensor forward(const std::vector<int>& tokens) const {
    return detail::decoder_forward(*this, tokens, nullptr);
  }
};

// Applies optional smoothing (from calibration stats), then optional
// rotation, then weight quantization. TransformOnly keeps FP32 weights,
// which isolates the transforms for equivalence checks.
inline QuantizedToyModel quantize_model(const ToyModel& model, QuantMode mode,
                                        const CalibrationStats& stats,
                                        const QuantizeModelOptions& options = {}) {
  for (const std::string& name : toy_linear_names(model.config.n_layers)) {
    if ((options.smooth_alpha || options.static_acts) &&
        stats.layers.find(name) == stats.layers.end()) {
      throw ConfigError("quantize_model: no calibration stats for layer " + name);
    }
  }
  if (mode == QuantMode::W8A8 && options.group_size != 0) {
    throw ConfigError("w8a8 weights use per-channel scales; group_size applies to w4a8");
  }

  QuantizedToyModel qm;
  qm.config = model.config;
  qm.mode = mode;
  qm.options = options;
  qm.embedding = model.embedding;
  qm.final_norm = model.final_norm;

  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    QuantizedToyModel::Layer qL;
    qL.attn_norm = model.layers[l].attn_norm;
    qL.mlp_norm = model.layers[l].mlp_norm;
    auto slot = [&qL](const std::string& kind) -> QLinearLayer& {
      if (kind == "attn_q") return qL.attn_q;
      if (kind == "attn_k") return qL.attn_k;
      if (kind == "attn_v") return qL.attn_v;
      if (kind == "attn_o") return qL.attn_o;
      if (kind == "mlp_up") return qL.mlp_up;
      return qL.mlp_down;
    };
    for (const char* kind : kLinearKinds) {
      const std::string name = linear_name(l, kind);
      Tensor w = model.linear_weight(l, kind);
      QLinearLayer layer;

      if (options.smooth_alpha) {
        const auto& ls = stats.layers.at(name);
        SmoothingVector sv =
            compute_smoothing(ls.channel_absmax, w, *options.smooth_alpha);
        w = apply_smoothing_to_weight(w, sv);
        layer.smoothing = std::move(sv);
      }
      const bool rotate_this =
          options.hadamard && (options.hadamard_layers.empty() ||
                               options.hadamard_layers.count(name) != 0);
      if (rotate_this) {
        HadamardTransform h = hadamard_matrix(w.rows());
        w = rotate_cols(w, h);
        layer.hadamard = true;
      }
      if (options.static_acts) {
        const auto& ls = stats.layers.at(name);
        // Static per-tensor activation scale from the calibrated absmax.
        layer.act_quant = ActQuant::PerTensorStatic;
        layer.act_scale =
            ls.tensor_absmax > 0.0f
                ? static_cast<float>(2.0 * static_cast<double>(ls.tensor_absmax) / 255.0)
                : kScaleFloor;
      }

      if (mode == QuantMode::TransformOnly) {
        layer.weight = std::move(w);
      } else if (mode == QuantMode::W8A8) {
        layer.weight = quantize(w, QuantScheme(8, Granularity::PerChannel));
      } else {
        QuantScheme ws = options.group_size == 0
                             ? QuantScheme(4, Granularity::PerChannel)
                             : QuantScheme(4, Granularity::PerGroup,
                                           options.group_size);
        layer.weight = quantize(w, ws);
      }
      slot(kind) = std::move(layer);
    }
    qm.layers.push_back(std::move(qL));
  }
  return qm;
}

inline nlohmann::json config_to_json(const ToyModelConfig& cfg) {
  return nlohmann::json{{"vocab", cfg.vocab},     {"d_model", cfg.d_model},
                        {"n_layers", cfg.n_layers}, {"n_heads", cfg.n_heads},
                        {"d_ff", cfg.d_ff},       {"max_seq", cfg.max_seq},
                        {"seed", cfg.seed}};
}

inline ToyModelConfig config_from_json(const nlohmann::json& j) {
  ToyModelConfig cfg;
  try {
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.d_ff = j.at("d_ff").get<std::size_t>();
    cfg.max_seq = j.at("max_seq").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config in metadata: ") + e.what());
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config in metadata: ") + e.what());
  }
  return cfg;
}

namespace detail {

inline void expect_shape(const Tensor& t, const std::vector<std::size_t>& shape,
                         const std::string& name) {
  if (t.shape() != shape) {
    throw FormatError("entry '" + name + "' has an unexpected shape");
  }
}

inline std::vector<std::size_t> linear_shape(const ToyModelConfig& cfg,
                                             const std::string& kind) {
  if (kind == "mlp_up") return {cfg.d_model, cfg.d_ff};
  if (kind == "mlp_down") return {cfg.d_ff, cfg.d_model};
  return {cfg.d_model, cfg.d_model};
}

}  // namespace detail

inline Container to_container(const ToyModel& model) {
  Container c;
  c.meta["model"] = config_to_json(model.config);
  c.put_tensor("embedding", model.embedding);
  c.put_tensor("final_norm", model.final_norm);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    c.put_tensor(prefix + "attn_norm", model.layers[l].attn_norm);
    c.put_tensor(prefix + "mlp_norm", model.layers[l].mlp_norm);
    for (const char* kind : kLinearKinds) {
      c.put_tensor(linear_name(l, kind), model.linear_weight(l, kind));
    }
  }
  return c;
}

inline ToyModel toy_model_from_container(const Container& c) {
  if (!c.meta.contains("model")) {
    throw FormatError("container metadata lacks a model config");
  }
  ToyModel m;
  m.config = config_from_json(c.meta["model"]);
  const ToyModelConfig& cfg = m.config;
  m.embedding = c.get_tensor("embedding");
  detail::expect_shape(m.embedding, {cfg.vocab, cfg.d_model}, "embedding");
  m.final_norm = c.get_tensor("final_norm");
  detail::expect_shape(m.final_norm, {cfg.d_model}, "final_norm");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    ToyModel::Layer L;
    L.attn_norm = c.get_tensor(prefix + "attn_norm");
    detail::expect_shape(L.attn_norm, {cfg.d_model}, prefix + "attn_norm");
    L.mlp_norm = c.get_tensor(prefix + "mlp_norm");
    detail::expect_shape(L.mlp_norm, {cfg.d_model}, prefix + "mlp_norm");
    m.layers.push_back(std::move(L));
    for (const char* kind : kLinearKinds) {
      const std::string name = linear_name(l, kind);
      Tensor w = c.get_tensor(name);
      detail::expect_shape(w, detail::linear_shape(cfg, kind), name);
      m.linear_weight(l, kind) = std::move(w);
    }
  }
  return m;
}

inline Container to_container(const QuantizedToyModel& model) {
  Container c;
  c.meta["model"] = config_to_json(model.config);

  nlohmann::json rotated = nlohmann::json::array();
  nlohmann::json static_scales = nlohmann::json::object();
  c.put_tensor("embedding", model.embedding);
  c.put_tensor("final_norm", model.final_norm);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    c.put_tensor(prefix + "attn_norm", model.layers[l].attn_norm);
    c.put_tensor(prefix + "mlp_norm", model.layers[l].mlp_norm);
    for (const char* kind : kLinearKinds) {
      const std::string name = linear_name(l, kind);
      const QLinearLayer& layer = model.linear(l, kind);
      if (layer.is_quantized()) {
        c.put_quantized(name, std::get<QuantizedTensor>(layer.weight));
      } else {
        c.put_tensor(name, std::get<Tensor>(layer.weight));
      }
      if (layer.smoothing) {
        c.put_tensor(name + ".smooth",
                     Tensor({layer.smoothing->s.size()}, layer.smoothing->s));
      }
      if (layer.hadamard) rotated.push_back(name);
      if (layer.act_quant == ActQuant::PerTensorStatic) {
        static_scales[name] = layer.act_scale;
      }
    }
  }
  c.meta["quant"] = nlohmann::json{
      {"mode", quant_mode_name(model.mode)},
      {"smooth_alpha", model.options.smooth_alpha
                           ? nlohmann::json(*model.options.smooth_alpha)
                           : nlohmann::json(nullptr)},
      {"hadamard", std::move(rotated)},
      {"group_size", model.options.group_size},
      {"static_act_scales", static_scales.empty()
                                ? nlohmann::json(nullptr)
                                : std::move(static_scales)}};
  return c;
}

inline QuantizedToyModel quantized_model_from_container(const Container& c) {
  if (!c.meta.contains("model") || !c.meta.contains("quant")) {
    throw FormatError("container metadata lacks model/quant records");
  }
  QuantizedToyModel m;
  m.config = config_from_json(c.meta["model"]);
  const nlohmann::json& jq = c.meta["quant"];
  std::set<std::string> rotated;
  nlohmann::json static_scales = nlohmann::json::object();
  try {
    const std::string mode = jq.at("mode").get<std::string>();
    if (mode == "w8a8") m.mode = QuantMode::W8A8;
    else if (mode == "w4a8") m.mode = QuantMode::W4A8;
    else if (mode == "transform_only") m.mode = QuantMode::TransformOnly;
    else throw FormatError("unknown quant mode '" + mode + "'");
    if (!jq.at("smooth_alpha").is_null()) {
      m.options.smooth_alpha = jq["smooth_alpha"].get<float>();
    }
    for (const auto& name : jq.at("hadamard")) {
      rotated.insert(name.get<std::string>());
    }
    m.options.group_size = jq.at("group_size").get<std::size_t>();
    if (!jq.at("static_act_scales").is_null()) {
      static_scales = jq["static_act_scales"];
      m.options.static_acts = true;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed quant record in metadata: ") + e.what());
  }
  m.options.hadamard = !rotated.empty();
  m.options.hadamard_layers = rotated;

  const ToyModelConfig& cfg = m.config;
  m.embedding = c.get_tensor("embedding");
  detail::expect_shape(m.embedding, {cfg.vocab, cfg.d_model}, "embedding");
  m.final_norm = c.get_tensor("final_norm");
  detail::expect_shape(m.final_norm, {cfg.d_model}, "final_norm");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    QuantizedToyModel::Layer L;
    L.attn_norm = c.get_tensor(prefix + "attn_norm");
    detail::expect_shape(L.attn_norm, {cfg.d_model}, prefix + "attn_norm");
    L.mlp_norm = c.get_tensor(prefix + "mlp_norm");
    detail::expect_shape(L.mlp_norm, {cfg.d_model}, prefix + "mlp_norm");
    m.layers.push_back(std::move(L));
    for (const char* kind : kLinearKinds) {
      const std::string name = linear_name(l, kind);
      const std::vector<std::size_t> wshape = detail::linear_shape(cfg, kind);
      QLinearLayer layer;
      if (m.mode == QuantMode::TransformOnly) {
        Tensor w = c.get_tensor(name);
        detail::expect_shape(w, wshape, name);
        layer.weight = std::move(w);
      } else {
        QuantizedTensor q = c.get_quantized(name);
        if (q.shape != wshape) {
          throw FormatError("entry '" + name + "' has an unexpected shape");
        }
        const int want_bits = m.mode == QuantMode::W8A8 ? 8 : 4;
        if (q.scheme.bits != want_bits) {
          throw FormatError("entry '" + name + "' dtype disagrees with quant mode");
        }
        layer.weight = std::move(q);
      }
      if (c.has(name + ".smooth")) {
        if (!m.options.smooth_alpha) {
          throw FormatError("smoothing vectors present but smooth_alpha is null");
        }
        Tensor s = c.get_tensor(name + ".smooth");
        detail::expect_shape(s, {wshape[0]}, name + ".smooth");
        SmoothingVector sv;
        sv.alpha = *m.options.smooth_alpha;
        sv.s.assign(s.data(), s.data() + s.elems());
        layer.smoothing = std::move(sv);
      }
      layer.hadamard = rotated.count(name) != 0;
      if (static_scales.contains(name)) {
        layer.act_quant = ActQuant::PerTensorStatic;
        layer.act_scale = static_scales[name].get<float>();
        if (!(layer.act_scale > 0.0f)) {
          throw FormatError("static activation scale for '" + name +
                            "' must be positive");
        }
      }
      m.linear(l, kind) = std::move(layer);
    }
  }
  return m;
}

// Greedy decoding; stops after max_new tokens, at the end-of-sequence
// token, or at the model's max_seq.
template <typename Model>
std::vector<int> generate(const Model& model, const std::vector<int>& prompt,
                          std::size_t max_new, bool greedy = true) {
  if (prompt.empty()) throw InputError("generate: prompt must be non-empty");
  if (!greedy) throw ConfigError("generate: only greedy decoding is supported");
  std::vector<int> tokens = prompt;
  for (std::size_t step = 0; step < max_new; ++step) {
    if (tokens.size() >= model.config.max_seq) break;
    Tensor logits = model.forward(tokens);
    const std::size_t last = logits.rows() - 1;
    int best = 0;
    float best_v = logits.at(last, 0);
    for (std::size_t t = 1; t < logits.cols(); ++t) {
      if (logits.at(last, t) > best_v) {
        best_v = logits.at(last, t);
        best = static_cast<int>(t);
      }
    }
    tokens.push_back(best);
    if (best == kEndOfSequence) break;
  }
  return tokens;
}

}  // namespace lbq

#endif  // LBQ_PIPELINE_HPP
