#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/gradcheck.hpp"
#include "l2v/objectives.hpp"
#include "l2v/rng.hpp"
#include "l2v/training.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

/// The small model used by the loss gradient checks: 2 layers, d = 32.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.vocab_size = 40;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 64;
  c.max_seq_len = 16;
  return c;
}

/// init_model with every matrix drawn at std `weight_std` instead of 0.02,
/// and norm gains drawn around 1, so gradients are large enough to resolve by
/// finite differences.
template <class T>
Model<T> gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, double weight_std = 0.3) {
  Model<T> m = init_model<T>(cfg, seed);
  CounterRng rng(seed, 0x67636b);
  for (const auto& [name, shape] : weight_layout(cfg)) {
    auto w = m.weight(name).mutable_data();
    for (auto& v : w) {
      v = is_norm_weight(name) ? static_cast<T>(1.0 + 0.2 * rng.normal()) : static_cast<T>(weight_std * rng.normal());
    }
  }
  return m;
}

struct LossCheck {
  std::string loss;
  CheckReport report;
};

inline nlohmann::json to_json(const LossCheck& c) {
  nlohmann::json j = {{"loss", c.loss},
                      {"pass", c.report.pass},
                      {"max_rel_err", c.report.max_rel_err},
                      {"coords", c.report.coords.size()},
                      {"flagged_non_differentiable", c.report.flagged}};
  if (const auto* w = c.report.worst()) {
    j["worst"] = {{"tensor", w->tensor}, {"index", w->index}, {"analytic", w->analytic}, {"numeric", w->numeric}};
  }
  return j;
}

/// Settings for check_loss_gradients per precision. f32 rounding noise in the
/// loss swamps small gradients, so the f32 check takes the largest-gradient
/// coordinates and a fourth-order stencil with a wide step.
template <class T>
GradCheckOptions loss_check_options(std::uint64_t seed = 0) {
  GradCheckOptions o;
  o.seed = seed;
  o.coords_per_tensor = 5;
  if constexpr (std::is_same_v<T, float>) {
    o.step = 2e-2;
    o.tolerance = 1e-3;
    o.stencil = Stencil::Central5;
    o.selection = CoordinateSelection::Largest;
  } else {
    o.step = 1e-5;
    o.tolerance = 1e-6;
  }
  return o;
}

template <class T>
inline constexpr double loss_check_weight_std = std::is_same_v<T, float> ? 0.15 : 0.3;

/// Finite-difference checks of the MNTP, SimCSE and supervised contrastive
/// losses with respect to every weight of a 2-layer model. MNTP and the
/// supervised loss run without dropout; SimCSE re-seeds its dropout stream on
/// every evaluation, so each loss is a deterministic function of the weights.
template <class T>
std::vector<LossCheck> check_loss_gradients(std::uint64_t seed, const GradCheckOptions& opts,
                                            double weight_std = loss_check_weight_std<T>) {
  const ModelConfig cfg = gradcheck_model_config();
  const Model<T> model = gradcheck_model<T>(cfg, seed, weight_std);
  CounterRng data_rng(seed, 0x64617461);
  const int vocab = static_cast<int>(cfg.vocab_size);
  auto random_ids = [&](std::size_t n) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(kNumSpecial + static_cast<int>(data_rng.below(vocab - kNumSpecial)));
    return ids;
  };
  auto spec = [&](std::size_t instr, std::size_t text) {
    PoolSpec s;
    s.ids.push_back(kBos);
    for (int id : random_ids(instr + text)) s.ids.push_back(id);
    s.ids.push_back(kEos);
    s.include.assign(s.ids.size(), false);
    for (std::size_t i = 1 + instr; i < s.ids.size(); ++i) s.include[i] = true;
    return s;
  };

  std::vector<std::vector<int>> rows;
  for (std::size_t len : {9, 12}) {
    std::vector<int> r{kBos};
    for (int id : random_ids(len)) r.push_back(id);
    rows.push_back(r);
  }
  CounterRng mask_rng(seed, kMaskStream);
  MaskedBatch masked = apply_masking(rows, MaskingConfig{MaskingStrategy::BertStyle, 0.3}, cfg.vocab_size, mask_rng);
  while (masked.supervision.empty()) {
    masked = apply_masking(rows, MaskingConfig{MaskingStrategy::BertStyle, 0.3}, cfg.vocab_size, mask_rng);
  }
  // near-duplicates keep the in-batch negatives close, so the loss is O(1)
  std::vector<PoolSpec> sentences{spec(0, 7)};
  for (int k = 0; k < 2; ++k) {
    PoolSpec s = sentences.front();
    for (std::size_t i : {2 + 2 * k, 3 + 2 * k}) {
      s.ids[i] = kNumSpecial + static_cast<int>(data_rng.below(vocab - kNumSpecial));
    }
    sentences.push_back(s);
  }
  const std::vector<ContrastiveItem> items{{spec(3, 5), spec(0, 6), {spec(0, 7)}}, {spec(3, 6), spec(0, 5), {spec(0, 6)}}};
  const ContrastiveConfig contrastive{};

  std::vector<std::pair<std::string, Tensor<T>>> params;
  for (const auto& [name, w] : model.weights()) params.emplace_back(name, w);

  std::vector<LossCheck> out;
  out.push_back({"mntp", grad_check<T>(
                             [&] { return mntp_loss(model, masked); },
                             params, opts)});
  out.push_back({"simcse", grad_check<T>(
                               [&] {
                                 CounterRng drop(seed, kDropoutStream);
                                 return simcse_loss(model, sentences, contrastive, 0.3, drop);
                               },
                               params, opts)});
  out.push_back({"supervised", grad_check<T>([&] { return supervised_contrastive_loss(model, items, contrastive); },
                                             params, opts)});
  return out;
}

}  // namespace l2v
