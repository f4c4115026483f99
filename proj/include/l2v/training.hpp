#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/objectives.hpp"
#include "l2v/optim.hpp"
#include "l2v/pooling.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

enum class Stage { Mntp, Simcse, Supervised };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Mntp: return "mntp";
    case Stage::Simcse: return "simcse";
    case Stage::Supervised: return "supervised";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  if (s == "mntp") return Stage::Mntp;
  if (s == "simcse") return Stage::Simcse;
  if (s == "supervised") return Stage::Supervised;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t warmup = 100;
  std::uint64_t seed = 0;
  AdamConfig adam{};

  void validate() const {
    if (steps == 0) throw ConfigError("steps must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (warmup > steps) throw ConfigError("warmup exceeds steps");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  }
};

/// Linear warmup over the first 10% of `steps`.
inline TrainConfig default_train_config(std::size_t steps, std::size_t batch_size, double lr,
                                        std::uint64_t seed = 0) {
  return TrainConfig{steps, batch_size, lr, steps / 10, seed, {}};
}

struct TrainResult {
  std::vector<double> losses;  // one per optimizer step

  double mean(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > losses.size()) throw IndexError("loss window out of range");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += losses[i];
    return s / static_cast<double>(end - begin);
  }
};

inline void write_loss_curve(const std::string& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "step,loss\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
}

/// Draws fixed-size batches of indices, reshuffling every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, CounterRng rng)
      : order_(n), batch_(batch_size), rng_(rng) {
    if (n < batch_size) {
      throw DataError("need at least " + std::to_string(batch_size) + " examples for one batch, have " +
                      std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    shuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) shuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng_.below(i));
      std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  CounterRng rng_;
  std::size_t pos_ = 0;
};

/// Runs cfg.steps Adam updates over `params`; `loss_at(step)` builds the loss
/// on the active tape.
template <class T>
TrainResult train_loop(const std::vector<Tensor<T>>& params, const TrainConfig& cfg,
                       const std::function<Tensor<T>(std::size_t)>& loss_at,
                       const std::function<void(std::size_t, double)>& on_step = {}) {
  cfg.validate();
  Adam<T> opt(params, cfg.adam);
  TrainResult result;
  result.losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    opt.zero_grad();
    const Tensor<T> loss = loss_at(step);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NumericFault("non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    opt.step(warmup_lr(cfg.lr, step, cfg.warmup));
    result.losses.push_back(value);
    if (on_step) on_step(step, value);
  }
  return result;
}

// Stream ids for the per-purpose generators of one run.
inline constexpr std::uint64_t kSamplerStream = 0x73616d70;
inline constexpr std::uint64_t kMaskStream = 0x6d61736b;
inline constexpr std::uint64_t kDropoutStream = 0x64726f70;

/// MNTP over BOS-prefixed token rows. A batch whose mask draw selects nothing
/// is redrawn (new masks, same rows).
template <class M>
TrainResult train_mntp(const M& model, const std::vector<std::vector<int>>& rows, const TrainConfig& cfg,
                       const MaskingConfig& masking, double dropout_p = 0.0,
                       const std::function<void(std::size_t, double)>& on_step = {}) {
  using T = typename M::scalar_type;
  cfg.validate();
  masking.validate();
  BatchSampler sampler(rows.size(), cfg.batch_size, CounterRng(cfg.seed, kSamplerStream));
  CounterRng mask_rng(cfg.seed, kMaskStream);
  CounterRng drop_rng(cfg.seed, kDropoutStream);
  return train_loop<T>(
      model.parameters(), cfg,
      [&](std::size_t) {
        std::vector<std::vector<int>> batch;
        for (std::size_t i : sampler.next()) batch.push_back(rows[i]);
        MaskedBatch masked = apply_masking(batch, masking, model.config().vocab_size, mask_rng);
        for (int tries = 0; masked.supervision.empty(); ++tries) {
          if (tries == 100) throw EmptyInputError("masking keeps selecting no positions");
          masked = apply_masking(batch, masking, model.config().vocab_size, mask_rng);
        }
        MntpOptions opts;
        opts.dropout_p = dropout_p;
        opts.rng = &drop_rng;
        return mntp_loss(model, masked, opts);
      },
      on_step);
}

template <class M>
TrainResult train_simcse(const M& model, const std::vector<PoolSpec>& sentences, const TrainConfig& cfg,
                         const ContrastiveConfig& contrastive, double dropout_p = 0.3,
                         const std::function<void(std::size_t, double)>& on_step = {}) {
  using T = typename M::scalar_type;
  cfg.validate();
  BatchSampler sampler(sentences.size(), cfg.batch_size, CounterRng(cfg.seed, kSamplerStream));
  CounterRng drop_rng(cfg.seed, kDropoutStream);
  const Encoder<T> encoder = model_encoder(model);
  return train_loop<T>(
      model.parameters(), cfg,
      [&](std::size_t) {
        std::vector<PoolSpec> batch;
        for (std::size_t i : sampler.next()) batch.push_back(sentences[i]);
        return simcse_loss<T>(encoder, batch, contrastive, dropout_p, drop_rng);
      },
      on_step);
}

template <class M>
TrainResult train_supervised(const M& model, const std::vector<ContrastiveItem>& items, const TrainConfig& cfg,
                             const ContrastiveConfig& contrastive, double dropout_p = 0.0,
                             const std::function<void(std::size_t, double)>& on_step = {}) {
  using T = typename M::scalar_type;
  cfg.validate();
  BatchSampler sampler(items.size(), cfg.batch_size, CounterRng(cfg.seed, kSamplerStream));
  CounterRng drop_rng(cfg.seed, kDropoutStream);
  const Encoder<T> encoder = model_encoder(model);
  return train_loop<T>(
      model.parameters(), cfg,
      [&](std::size_t) {
        std::vector<ContrastiveItem> batch;
        for (std::size_t i : sampler.next()) batch.push_back(items[i]);
        return supervised_contrastive_loss<T>(encoder, batch, contrastive, dropout_p,
                                              dropout_p > 0.0 ? &drop_rng : nullptr);
      },
      on_step);
}

/// BOS + text tokens (no EOS), as used for MNTP rows.
inline std::vector<int> mntp_row(const Vocab& vocab, std::string_view text, std::size_t max_len) {
  std::vector<int> ids = vocab.encode(text, true, false).ids;
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

}  // namespace l2v
