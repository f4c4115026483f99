#pragma once

// LLaMA-style decoder stack: pre-RMSNorm, rotary positions, SwiGLU MLP, no
// biases. The attention mask (causal or bidirectional) is chosen per call;
// nothing else differs between the two modes.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"

namespace l2v {

struct ModelConfig {
  std::size_t vocab_size = 2048;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  double dropout_p = 0.0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (d_head() % 2 != 0) throw ConfigError("d_head must be even for rotary embeddings");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
    if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) throw ConfigError("rope_theta and norm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                     {"dropout_p", c.dropout_p},   {"rope_theta", c.rope_theta},
                     {"norm_eps", c.norm_eps}};
}

/// Strict parse: unknown keys are rejected, missing keys keep defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
    else if (key == "d_model") c.d_model = value.get<std::size_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
    else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
    else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
    else if (key == "max_seq_len") c.max_seq_len = value.get<std::size_t>();
    else if (key == "dropout_p") c.dropout_p = value.get<double>();
    else if (key == "rope_theta") c.rope_theta = value.get<double>();
    else if (key == "norm_eps") c.norm_eps = value.get<double>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
}

inline std::string layer_name(std::size_t layer, const char* leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

/// Every weight name with its shape, in canonical order. Linear weights are
/// stored [out, in]; the output head is [d_model, vocab].
inline std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed", Shape{c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.emplace_back(layer_name(l, "attn_norm"), Shape{c.d_model});
    out.emplace_back(layer_name(l, "wq"), Shape{c.d_model, c.d_model});
    out.emplace_back(layer_name(l, "wk"), Shape{c.d_model, c.d_model});
    out.emplace_back(layer_name(l, "wv"), Shape{c.d_model, c.d_model});
    out.emplace_back(layer_name(l, "wo"), Shape{c.d_model, c.d_model});
    out.emplace_back(layer_name(l, "mlp_norm"), Shape{c.d_model});
    out.emplace_back(layer_name(l, "w_gate"), Shape{c.d_ff, c.d_model});
    out.emplace_back(layer_name(l, "w_up"), Shape{c.d_ff, c.d_model});
    out.emplace_back(layer_name(l, "w_down"), Shape{c.d_model, c.d_ff});
  }
  out.emplace_back("final_norm", Shape{c.d_model});
  out.emplace_back("head", Shape{c.d_model, c.vocab_size});
  return out;
}

inline bool is_norm_weight(const std::string& name) {
  return name == "final_norm" || name.ends_with("attn_norm") || name.ends_with("mlp_norm");
}

template <class T>
class Model {
 public:
  using scalar_type = T;

  Model() = default;

  Model(ModelConfig config, std::map<std::string, Tensor<T>> weights)
      : config_(config), weights_(std::move(weights)) {
    config_.validate();
    const auto layout = weight_layout(config_);
    if (layout.size() != weights_.size()) {
      throw NameError("model expects " + std::to_string(layout.size()) + " weights, got " +
                      std::to_string(weights_.size()));
    }
    for (const auto& [name, shape] : layout) {
      auto it = weights_.find(name);
      if (it == weights_.end()) throw NameError("missing weight '" + name + "'");
      if (it->second.shape() != shape) {
        throw ShapeError("weight '" + name + "' has shape " + shape_string(it->second.shape()) +
                         ", expected " + shape_string(shape));
      }
      detail::check_finite<T>(it->second.data(), name);
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  const std::map<std::string, Tensor<T>>& weights() const noexcept { return weights_; }

  const Tensor<T>& weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw NameError("unknown weight '" + name + "'");
    return it->second;
  }
  Tensor<T>& weight(const std::string& name) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw NameError("unknown weight '" + name + "'");
    return it->second;
  }

  /// x W^T for the linear weight `name`.
  Tensor<T> project(const std::string& name, const Tensor<T>& x) const {
    return matmul_nt(x, weight(name));
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, w] : weights_) out.push_back(w);
    return out;
  }

  void set_trainable(bool flag) {
    for (auto& [name, w] : weights_) w.set_requires_grad(flag);
  }

  /// Deep copy; the copy's weights keep their requires_grad flags.
  Model clone() const {
    std::map<std::string, Tensor<T>> copy;
    for (const auto& [name, w] : weights_) copy.emplace(name, w.clone());
    return Model(config_, std::move(copy));
  }

  template <class U>
  Model<U> cast() const {
    std::map<std::string, Tensor<U>> copy;
    for (const auto& [name, w] : weights_) copy.emplace(name, w.template cast<U>());
    return Model<U>(config_, std::move(copy));
  }

 private:
  ModelConfig config_;
  std::map<std::string, Tensor<T>> weights_;
};

/// Anything forward() can run: a plain Model or a LoRA-adapted one.
template <class M>
concept TransformerWeights = requires(const M& m, const std::string& name,
                                      const Tensor<typename M::scalar_type>& x) {
  typename M::scalar_type;
  { m.config() } -> std::convertible_to<const ModelConfig&>;
  { m.weight(name) } -> std::convertible_to<const Tensor<typename M::scalar_type>&>;
  { m.project(name, x) } -> std::same_as<Tensor<typename M::scalar_type>>;
};

/// Truncated-normal (std 0.02, cut at two std) matrices and unit norm gains,
/// drawn in weight_layout order from a stream of `seed`.
template <class T = float>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CounterRng rng(seed, 0x696e6974);
  std::map<std::string, Tensor<T>> weights;
  for (const auto& [name, shape] : weight_layout(config)) {
    const std::size_t n = shape_numel(shape);
    std::vector<T> values(n);
    if (is_norm_weight(name)) {
      std::fill(values.begin(), values.end(), T(1));
    } else {
      for (auto& v : values) v = static_cast<T>(rng.truncated_normal(0.02));
    }
    weights.emplace(name, Tensor<T>(shape, std::move(values), true));
  }
  return Model<T>(config, std::move(weights));
}

template <class T>
struct ForwardTrace {
  /// n_layers + 1 entries of [T, d]; entry 0 is the token embedding.
  std::vector<Tensor<T>> hidden;
  /// final_norm(hidden.back()).
  Tensor<T> normed;
  /// [T, vocab]; undefined when logits were not requested.
  Tensor<T> logits;
  AttentionMode mode = AttentionMode::Causal;
  bool dropout_active = false;
  /// Per layer, pre-dropout attention probabilities [head][query][key].
  std::vector<std::vector<T>> attention;

  const Tensor<T>& last_hidden() const { return hidden.back(); }
  /// Last-layer output after the final norm: what pooling and probes read.
  const Tensor<T>& output() const { return normed; }
};

struct ForwardOptions {
  AttentionMode mode = AttentionMode::Causal;
  /// Dropout on attention probabilities and MLP activations; 0 disables it.
  double dropout_p = 0.0;
  CounterRng* rng = nullptr;
  bool compute_logits = true;
  bool record_attention = false;
  /// Instrumentation: rows of the last hidden state to zero before the final
  /// norm and head. Empty means keep all.
  std::vector<bool> keep_final_rows;
};

template <TransformerWeights M>
ForwardTrace<typename M::scalar_type> forward(const M& model, std::span<const int> ids,
                                              const ForwardOptions& opts = {}) {
  using T = typename M::scalar_type;
  const ModelConfig& cfg = model.config();
  if (ids.empty() || ids.size() > cfg.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(ids.size()) + " outside [1, " +
                      std::to_string(cfg.max_seq_len) + "]");
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
  const bool use_dropout = opts.dropout_p > 0.0;
  if (use_dropout && opts.rng == nullptr) throw ConfigError("dropout requires an rng");

  ForwardTrace<T> trace;
  trace.mode = opts.mode;
  trace.dropout_active = use_dropout;
  const T eps = static_cast<T>(cfg.norm_eps);

  Tensor<T> h = embedding(model.weight("embed"), ids);
  trace.hidden.push_back(h);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Tensor<T> a = rms_norm(h, model.weight(layer_name(l, "attn_norm")), eps);
    const Tensor<T> q = rope(model.project(layer_name(l, "wq"), a), cfg.n_heads, cfg.rope_theta);
    const Tensor<T> k = rope(model.project(layer_name(l, "wk"), a), cfg.n_heads, cfg.rope_theta);
    const Tensor<T> v = model.project(layer_name(l, "wv"), a);
    std::vector<T> probs;
    const Tensor<T> o = attention(q, k, v, cfg.n_heads, opts.mode, opts.dropout_p, opts.rng,
                                  opts.record_attention ? &probs : nullptr);
    if (opts.record_attention) trace.attention.push_back(std::move(probs));
    h = add(h, model.project(layer_name(l, "wo"), o));

    const Tensor<T> m = rms_norm(h, model.weight(layer_name(l, "mlp_norm")), eps);
    Tensor<T> f = swiglu(model.project(layer_name(l, "w_gate"), m),
                         model.project(layer_name(l, "w_up"), m));
    if (use_dropout) f = dropout(f, opts.dropout_p, *opts.rng);
    h = add(h, model.project(layer_name(l, "w_down"), f));
    trace.hidden.push_back(h);
  }
  Tensor<T> last = trace.hidden.back();
  if (!opts.keep_final_rows.empty()) last = mask_rows(last, opts.keep_final_rows);
  trace.normed = rms_norm(last, model.weight("final_norm"), eps);
  if (opts.compute_logits) trace.logits = matmul(trace.normed, model.weight("head"));
  return trace;
}

/// forward(model, tokens, mode, dropout, rng): dropout uses config().dropout_p.
template <TransformerWeights M>
ForwardTrace<typename M::scalar_type> forward(const M& model, std::span<const int> ids,
                                              AttentionMode mode, bool dropout = false,
                                              CounterRng* rng = nullptr) {
  ForwardOptions opts;
  opts.mode = mode;
  opts.dropout_p = dropout ? model.config().dropout_p : 0.0;
  opts.rng = rng;
  return forward(model, ids, opts);
}

}  // namespace l2v
