#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/ops.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

/// Low-rank update for one weight W[out, in]: W + (alpha / r) B A with
/// A[r, in] and B[out, r].
template <class T>
struct LoraAdapter {
  Tensor<T> a;
  Tensor<T> b;

  std::size_t rank() const { return a.dim(0); }
};

struct LoraSettings {
  std::size_t rank = 16;
  double alpha = 32.0;
  std::vector<std::string> targets;  // empty: every attention and MLP projection

  double scaling() const { return alpha / static_cast<double>(rank); }
};

/// W^Q, W^K, W^V, W^O and the three MLP matrices of every layer.
inline std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (const char* leaf : {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"}) {
      out.push_back(layer_name(l, leaf));
    }
  }
  return out;
}

/// A frozen base model plus trainable adapters. Satisfies TransformerWeights.
template <class T>
class AdaptedModel {
 public:
  using scalar_type = T;

  AdaptedModel(Model<T> base, LoraSettings settings, std::map<std::string, LoraAdapter<T>> adapters)
      : base_(std::move(base)), settings_(std::move(settings)), adapters_(std::move(adapters)) {
    base_.set_trainable(false);
    for (auto& [name, ad] : adapters_) {
      const Tensor<T>& w = base_.weight(name);
      if (ad.a.shape() != Shape{settings_.rank, w.dim(1)} ||
          ad.b.shape() != Shape{w.dim(0), settings_.rank}) {
        throw ShapeError("adapter for '" + name + "' does not match rank " +
                         std::to_string(settings_.rank));
      }
      ad.a.set_requires_grad(true);
      ad.b.set_requires_grad(true);
    }
  }

  const ModelConfig& config() const noexcept { return base_.config(); }
  const Tensor<T>& weight(const std::string& name) const { return base_.weight(name); }
  const Model<T>& base() const noexcept { return base_; }
  const LoraSettings& settings() const noexcept { return settings_; }
  const std::map<std::string, LoraAdapter<T>>& adapters() const noexcept { return adapters_; }

  Tensor<T> project(const std::string& name, const Tensor<T>& x) const {
    Tensor<T> y = base_.project(name, x);
    auto it = adapters_.find(name);
    if (it == adapters_.end()) return y;
    const Tensor<T> low = matmul_nt(matmul_nt(x, it->second.a), it->second.b);
    return add(y, scale(low, static_cast<T>(settings_.scaling())));
  }

  /// Trainable tensors: A and B of every adapter.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, ad] : adapters_) {
      out.push_back(ad.a);
      out.push_back(ad.b);
    }
    return out;
  }

  /// Copies A and B from `source`, which must cover exactly this model's
  /// targets with matching shapes.
  void load_adapters(const std::map<std::string, LoraAdapter<T>>& source) {
    if (source.size() != adapters_.size()) throw ShapeError("adapter sets differ in size");
    for (auto& [name, ad] : adapters_) {
      auto it = source.find(name);
      if (it == source.end()) throw NameError("source has no adapter for '" + name + "'");
      if (it->second.a.shape() != ad.a.shape() || it->second.b.shape() != ad.b.shape()) {
        throw ShapeError("adapter '" + name + "' shape mismatch: rank " +
                         std::to_string(it->second.rank()) + " into rank " + std::to_string(ad.rank()));
      }
    }
    for (auto& [name, ad] : adapters_) {
      const auto& src = source.at(name);
      std::copy(src.a.data().begin(), src.a.data().end(), ad.a.mutable_data().begin());
      std::copy(src.b.data().begin(), src.b.data().end(), ad.b.mutable_data().begin());
    }
  }

 private:
  Model<T> base_;
  LoraSettings settings_;
  std::map<std::string, LoraAdapter<T>> adapters_;
};

/// Freezes a copy of `model` and attaches adapters with A ~ N(0, 1/r)
/// (variance) and B = 0, so the adapted forward equals the base forward.
template <class T>
AdaptedModel<T> attach_lora(const Model<T>& model, LoraSettings settings, std::uint64_t seed) {
  if (settings.rank == 0) throw ConfigError("LoRA rank must be positive");
  if (settings.targets.empty()) settings.targets = default_lora_targets(model.config());
  std::set<std::string> seen;
  for (const auto& name : settings.targets) {
    if (!seen.insert(name).second) throw NameError("duplicate LoRA target '" + name + "'");
    const auto& w = model.weight(name);
    if (w.rank() != 2) throw NameError("LoRA target '" + name + "' is not a matrix");
  }
  CounterRng rng(seed, 0x6c6f7261);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(settings.rank));
  std::map<std::string, LoraAdapter<T>> adapters;
  for (const auto& name : settings.targets) {
    const auto& w = model.weight(name);
    std::vector<T> a(settings.rank * w.dim(1));
    for (auto& v : a) v = static_cast<T>(rng.normal() * stddev);
    adapters.emplace(name, LoraAdapter<T>{Tensor<T>({settings.rank, w.dim(1)}, std::move(a), true),
                                          Tensor<T>::zeros({w.dim(0), settings.rank}, true)});
  }
  return AdaptedModel<T>(model.clone(), std::move(settings), std::move(adapters));
}

template <class T>
AdaptedModel<T> attach_lora(const Model<T>& model, std::size_t rank, double alpha,
                            std::vector<std::string> targets, std::uint64_t seed) {
  return attach_lora(model, LoraSettings{rank, alpha, std::move(targets)}, seed);
}

/// Plain model with W' = W + (alpha/r) B A for every target, accumulated in
/// double. The result is trainable and carries no adapter state.
template <class T>
Model<T> merge_lora(const AdaptedModel<T>& adapted) {
  std::map<std::string, Tensor<T>> weights;
  const double s = adapted.settings().scaling();
  for (const auto& [name, w] : adapted.base().weights()) {
    std::vector<T> values(w.values());
    auto it = adapted.adapters().find(name);
    if (it != adapted.adapters().end()) {
      const auto& a = it->second.a;
      const auto& b = it->second.b;
      const std::size_t out = w.dim(0), in = w.dim(1), r = a.dim(0);
      for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < in; ++j) {
          double delta = 0.0;
          for (std::size_t k = 0; k < r; ++k)
            delta += static_cast<double>(b.at(i, k)) * static_cast<double>(a.at(k, j));
          values[i * in + j] = static_cast<T>(static_cast<double>(values[i * in + j]) + s * delta);
        }
    }
    weights.emplace(name, Tensor<T>(w.shape(), std::move(values), true));
  }
  return Model<T>(adapted.config(), std::move(weights));
}

/// Overwrites the adapters of `adapted` with copies of `source`.
template <class T>
void init_adapter_from(AdaptedModel<T>& adapted, const std::map<std::string, LoraAdapter<T>>& source) {
  adapted.load_adapters(source);
}

}  // namespace l2v
