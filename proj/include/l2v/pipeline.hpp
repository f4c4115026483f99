#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/checkpoint.hpp"
#include "l2v/data.hpp"
#include "l2v/error.hpp"
#include "l2v/lora.hpp"
#include "l2v/objectives.hpp"
#include "l2v/pooling.hpp"
#include "l2v/tokenizer.hpp"
#include "l2v/training.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

// ---------------------------------------------------------------------------
// Run configuration

struct StageTrain {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::optional<std::size_t> warmup;  // unset: 10% of steps

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig t{steps, batch_size, lr, warmup.value_or(steps / 10), seed, {}};
    t.validate();
    return t;
  }
};

struct TokenizerSettings {
  std::string vocab;   // existing vocab file; empty: train one
  std::string corpus;  // training text; empty: the MNTP corpus
  std::size_t vocab_size = 320;
};

struct MntpSettings {
  MaskingConfig masking{};
  double dropout_p = 0.0;
  StageTrain train{};
};

struct SimcseSettings {
  double dropout_p = 0.3;
  ContrastiveConfig contrastive{};
  StageTrain train{};
};

struct SupervisedSettings {
  double dropout_p = 0.0;
  ContrastiveConfig contrastive{};
  StageTrain train{1000, 32, 2e-4, 300};
};

struct PathSettings {
  std::string mntp_corpus;
  std::string simcse_corpus;
  std::string supervised_data;
  std::string run_dir;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model{};
  TokenizerSettings tokenizer{};
  LoraSettings lora{};
  MntpSettings mntp{};
  SimcseSettings simcse{};
  SupervisedSettings supervised{};
  PathSettings paths{};
};

namespace detail {

/// Visits the keys of a JSON object, rejecting any key the visitor does not
/// claim.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key + "' in config section '" + name_ + "'");
    }
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + name_ + "." + key + "': " + e.what());
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline void read_train(const nlohmann::json* j, const std::string& name, StageTrain& t) {
  if (!j) return;
  Section s(*j, name);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("lr", t.lr);
  std::size_t warmup = t.warmup.value_or(0);
  s.get("warmup", warmup);
  if (j->contains("warmup")) t.warmup = warmup;
}

inline nlohmann::json train_json(const StageTrain& t) {
  nlohmann::json j = {{"steps", t.steps}, {"batch_size", t.batch_size}, {"lr", t.lr}};
  if (t.warmup) j["warmup"] = *t.warmup;
  return j;
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (std::filesystem::absolute(base.empty() ? std::filesystem::path(".") : base) / path).lexically_normal().string();
}

}  // namespace detail

/// Parses a run config. Relative paths resolve against `base_dir`; every
/// named input file must exist.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  RunConfig c;
  {
    detail::Section top(j, "root");
    top.get("seed", c.seed);
    if (const auto* m = top.child("model")) {
      try {
        c.model = m->get<ModelConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model section: ") + e.what());
      }
    }
    if (const auto* t = top.child("tokenizer")) {
      detail::Section s(*t, "tokenizer");
      s.get("vocab", c.tokenizer.vocab);
      s.get("corpus", c.tokenizer.corpus);
      s.get("vocab_size", c.tokenizer.vocab_size);
    }
    if (const auto* l = top.child("lora")) {
      detail::Section s(*l, "lora");
      s.get("rank", c.lora.rank);
      s.get("alpha", c.lora.alpha);
      s.get("targets", c.lora.targets);
    }
    if (const auto* m = top.child("mntp")) {
      detail::Section s(*m, "mntp");
      std::string strategy(to_string(c.mntp.masking.strategy));
      s.get("strategy", strategy);
      c.mntp.masking.strategy = parse_masking_strategy(strategy);
      s.get("mask_prob", c.mntp.masking.mask_prob);
      s.get("dropout_p", c.mntp.dropout_p);
      detail::read_train(s.child("train"), "mntp.train", c.mntp.train);
    }
    if (const auto* m = top.child("simcse")) {
      detail::Section s(*m, "simcse");
      s.get("dropout_p", c.simcse.dropout_p);
      s.get("temperature", c.simcse.contrastive.temperature);
      detail::read_train(s.child("train"), "simcse.train", c.simcse.train);
    }
    if (const auto* m = top.child("supervised")) {
      detail::Section s(*m, "supervised");
      s.get("dropout_p", c.supervised.dropout_p);
      s.get("temperature", c.supervised.contrastive.temperature);
      detail::read_train(s.child("train"), "supervised.train", c.supervised.train);
    }
    if (const auto* p = top.child("paths")) {
      detail::Section s(*p, "paths");
      s.get("mntp_corpus", c.paths.mntp_corpus);
      s.get("simcse_corpus", c.paths.simcse_corpus);
      s.get("supervised_data", c.paths.supervised_data);
      s.get("run_dir", c.paths.run_dir);
    }
  }
  c.model.validate();
  c.mntp.masking.validate();
  c.simcse.contrastive.validate();
  c.supervised.contrastive.validate();
  if (c.lora.rank == 0) throw ConfigError("lora.rank must be positive");
  for (double p : {c.mntp.dropout_p, c.simcse.dropout_p, c.supervised.dropout_p})
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
  for (const auto* t : {&c.mntp.train, &c.simcse.train, &c.supervised.train}) (void)t->resolve(c.seed);

  for (std::string* p : {&c.tokenizer.vocab, &c.tokenizer.corpus, &c.paths.mntp_corpus, &c.paths.simcse_corpus,
                         &c.paths.supervised_data}) {
    *p = detail::resolve_path(*p, base_dir);
    if (!p->empty() && !std::filesystem::is_regular_file(*p)) throw ConfigError("input file not found: " + *p);
  }
  c.paths.run_dir = detail::resolve_path(c.paths.run_dir, base_dir);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, std::filesystem::path(path).parent_path());
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", c.model},
          {"tokenizer", {{"vocab", c.tokenizer.vocab}, {"corpus", c.tokenizer.corpus},
                         {"vocab_size", c.tokenizer.vocab_size}}},
          {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"targets", c.lora.targets}}},
          {"mntp", {{"strategy", std::string(to_string(c.mntp.masking.strategy))},
                    {"mask_prob", c.mntp.masking.mask_prob},
                    {"dropout_p", c.mntp.dropout_p},
                    {"train", detail::train_json(c.mntp.train)}}},
          {"simcse", {{"dropout_p", c.simcse.dropout_p},
                      {"temperature", c.simcse.contrastive.temperature},
                      {"train", detail::train_json(c.simcse.train)}}},
          {"supervised", {{"dropout_p", c.supervised.dropout_p},
                          {"temperature", c.supervised.contrastive.temperature},
                          {"train", detail::train_json(c.supervised.train)}}},
          {"paths", {{"mntp_corpus", c.paths.mntp_corpus}, {"simcse_corpus", c.paths.simcse_corpus},
                     {"supervised_data", c.paths.supervised_data}, {"run_dir", c.paths.run_dir}}}};
}

/// CRC-32 of the canonical JSON dump, as 8 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  return buf;
}

// ---------------------------------------------------------------------------
// Logging

inline void log_line(std::ostream& os, const std::string& level, const std::vector<std::pair<std::string, std::string>>& kv) {
  os << "level=" << level;
  for (const auto& [k, v] : kv) {
    const bool quote = v.find_first_of(" \t\"=") != std::string::npos || v.empty();
    os << ' ' << k << '=';
    if (quote) os << nlohmann::json(v).dump();
    else os << v;
  }
  os << '\n';
}

// ---------------------------------------------------------------------------
// Run directory

/// Stage names recorded in checkpoints; the lineage chain is
/// base -> mntp -> mntp-merged -> simcse -> simcse-merged -> supervised.
inline const char* required_input_stage(Stage s) {
  switch (s) {
    case Stage::Mntp: return "base";
    case Stage::Simcse: return "mntp-merged";
    case Stage::Supervised: return "simcse-merged";
  }
  return "";
}

struct StageOptions {
  std::string from;  // input checkpoint; empty: the stage's default
  bool allow_skip = false;
  std::optional<std::size_t> steps;  // overrides the stage's configured steps
  std::ostream* log = &std::cerr;
  std::size_t log_every = 50;
};

class RunDirectory {
 public:
  RunDirectory(std::filesystem::path dir, RunConfig config, std::string version = "unknown")
      : dir_(std::move(dir)), config_(std::move(config)), version_(std::move(version)) {
    if (dir_.empty()) throw UsageError("no run directory: pass --out or set paths.run_dir");
    std::filesystem::create_directories(dir_ / "checkpoints");
    std::filesystem::create_directories(dir_ / "curves");
    std::filesystem::create_directories(dir_ / "reports");
    const auto manifest_path = dir_ / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
      try {
        manifest_ = nlohmann::json::parse(read_file(manifest_path.string()));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("unreadable manifest: " + std::string(e.what()));
      }
    } else {
      manifest_ = {{"stages", nlohmann::json::array()}};
    }
    manifest_["version"] = version_;
    manifest_["config_hash"] = hash();
    manifest_["seed"] = config_.seed;
    write_text(dir_ / "config.json", to_json(config_).dump(2) + "\n");
    save_manifest();
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }
  const RunConfig& config() const noexcept { return config_; }
  const nlohmann::json& manifest() const noexcept { return manifest_; }
  /// Hash of the config without its output location.
  std::string hash() const {
    nlohmann::json j = to_json(config_);
    j["paths"].erase("run_dir");
    return config_hash(j);
  }

  std::filesystem::path checkpoint_path(const std::string& stage) const {
    return dir_ / "checkpoints" / (stage + ".ckpt");
  }
  std::filesystem::path vocab_path() const { return dir_ / "vocab.txt"; }

  /// Most recently written checkpoint.
  std::filesystem::path latest() const {
    if (!manifest_.contains("latest")) throw UsageError("run directory has no checkpoints yet; run init first");
    return dir_ / manifest_.at("latest").get<std::string>();
  }

  Vocab vocab() const {
    if (!std::filesystem::exists(vocab_path())) throw UsageError("run directory has no vocab; run init first");
    return Vocab::load(vocab_path().string());
  }

  /// Loads or trains the tokenizer and writes vocab.txt.
  Vocab train_tokenizer(std::ostream& log = std::cerr) {
    const auto t0 = std::chrono::steady_clock::now();
    Vocab v;
    std::string source;
    if (!config_.tokenizer.vocab.empty()) {
      source = config_.tokenizer.vocab;
      v = Vocab::load(source);
    } else {
      source = !config_.tokenizer.corpus.empty() ? config_.tokenizer.corpus : config_.paths.mntp_corpus;
      if (source.empty()) throw UsageError("missing config keys: tokenizer.vocab or tokenizer.corpus or paths.mntp_corpus");
      v = train_bpe(read_file(source), config_.tokenizer.vocab_size, config_.seed);
    }
    v.save(vocab_path().string());
    record({{"stage", "tokenizer"}, {"input", source}, {"output", "vocab.txt"}, {"seconds", seconds_since(t0)}},
           std::nullopt);
    log_line(log, "info", {{"cmd", "tokenizer-train"}, {"vocab_size", std::to_string(v.size())}, {"source", source}});
    return v;
  }

  /// Base model: tokenizer (reused if present) plus seeded initial weights.
  std::filesystem::path init(std::ostream& log = std::cerr) {
    const auto t0 = std::chrono::steady_clock::now();
    const Vocab v = std::filesystem::exists(vocab_path()) ? vocab() : train_tokenizer(log);
    ModelConfig mc = config_.model;
    if (mc.vocab_size != v.size()) {
      log_line(log, "info", {{"cmd", "init"}, {"event", "vocab_size_from_tokenizer"},
                             {"config", std::to_string(mc.vocab_size)}, {"tokenizer", std::to_string(v.size())}});
      mc.vocab_size = v.size();
    }
    const Model<float> model = init_model<float>(mc, config_.seed);
    const auto out = checkpoint_path("base");
    save_checkpoint(model, out.string(), stage_meta("base", {}, {}));
    record({{"stage", "base"}, {"input", nullptr}, {"output", relative(out)}, {"seconds", seconds_since(t0)}}, out);
    log_line(log, "info", {{"cmd", "init"}, {"output", out.string()}, {"d_model", std::to_string(mc.d_model)},
                           {"n_layers", std::to_string(mc.n_layers)}});
    return out;
  }

  /// Trains fresh LoRA adapters for `stage` on top of a merged input.
  std::filesystem::path train(Stage stage, const StageOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    std::ostream& log = *opts.log;
    const auto input = opts.from.empty() ? checkpoint_path(required_input_stage(stage)) : std::filesystem::path(opts.from);
    if (!std::filesystem::exists(input)) throw UsageError("input checkpoint not found: " + input.string());
    const LoadedCheckpoint in = load_checkpoint(input.string());
    const std::string in_stage = in.meta.value("stage", "unknown");
    std::vector<std::string> overrides = in.meta.value("overrides", std::vector<std::string>{});
    if (in.lora) throw LineageError("input checkpoint " + input.string() + " holds unmerged adapters; run merge-lora first");
    if (in_stage != required_input_stage(stage)) {
      const std::string msg = std::string(to_string(stage)) + " expects a '" + required_input_stage(stage) +
                              "' checkpoint, got '" + in_stage + "'";
      if (!opts.allow_skip) throw LineageError(msg + " (pass --allow-skip to override)");
      overrides.push_back(msg);
      log_line(log, "warn", {{"cmd", "train"}, {"stage", std::string(to_string(stage))}, {"override", msg}});
    }

    const Vocab v = vocab();
    if (v.size() != in.config.vocab_size) throw ConfigError("run vocab does not match the checkpoint's vocab size");
    AdaptedModel<float> model = attach_lora(in.model, config_.lora, stage_seed(stage));
    const std::size_t max_len = in.config.max_seq_len;
    const std::string stage_name(to_string(stage));
    auto on_step = [&](std::size_t step, double loss) {
      if (step % opts.log_every == 0 || step + 1 == steps_of(stage, opts)) {
        std::ostringstream l;
        l << loss;
        log_line(log, "info", {{"cmd", "train"}, {"stage", stage_name}, {"step", std::to_string(step)}, {"loss", l.str()}});
      }
    };
    TrainResult result;
    switch (stage) {
      case Stage::Mntp: {
        const std::string path = require_path(config_.paths.mntp_corpus, "paths.mntp_corpus");
        std::vector<std::vector<int>> rows;
        for (const auto& s : load_sentences(path)) rows.push_back(mntp_row(v, s, max_len));
        result = train_mntp(model, rows, train_config(config_.mntp.train, stage, opts), config_.mntp.masking,
                            config_.mntp.dropout_p, on_step);
        break;
      }
      case Stage::Simcse: {
        const std::string path = require_path(config_.paths.simcse_corpus, "paths.simcse_corpus");
        std::vector<PoolSpec> specs;
        std::size_t skipped = 0;
        for (const auto& s : load_sentences(path)) {
          try {
            specs.push_back(build_pool_spec(v, "", s, max_len));
          } catch (const LengthError&) {
            ++skipped;
          }
        }
        if (skipped) {
          log_line(log, "warn", {{"cmd", "train"}, {"stage", stage_name}, {"skipped_overlong", std::to_string(skipped)}});
        }
        result = train_simcse(model, specs, train_config(config_.simcse.train, stage, opts), config_.simcse.contrastive,
                              config_.simcse.dropout_p, on_step);
        break;
      }
      case Stage::Supervised: {
        const std::string path = require_path(config_.paths.supervised_data, "paths.supervised_data");
        std::vector<ContrastiveItem> items;
        std::size_t skipped = 0;
        for (const auto& ex : load_contrastive(path)) {
          try {
            items.push_back(tokenize_example(v, ex, max_len));
          } catch (const LengthError&) {
            ++skipped;
          }
        }
        if (skipped) {
          log_line(log, "warn", {{"cmd", "train"}, {"stage", stage_name}, {"skipped_overlong", std::to_string(skipped)}});
        }
        result = train_supervised(model, items, train_config(config_.supervised.train, stage, opts),
                                  config_.supervised.contrastive, config_.supervised.dropout_p, on_step);
        break;
      }
    }
    const auto out = checkpoint_path(stage_name);
    std::vector<std::string> lineage = in.meta.value("lineage", std::vector<std::string>{});
    lineage.push_back(in_stage);
    save_checkpoint(model, out.string(), stage_meta(stage_name, lineage, overrides));
    const auto curve = dir_ / "curves" / (stage_name + ".csv");
    write_loss_curve(curve.string(), result.losses);
    record({{"stage", stage_name},
            {"input", input.string()},
            {"input_stage", in_stage},
            {"output", relative(out)},
            {"curve", relative(curve)},
            {"steps", result.losses.size()},
            {"final_loss", result.losses.back()},
            {"overrides", overrides},
            {"flags", opts.steps ? nlohmann::json{{"steps", *opts.steps}} : nlohmann::json::object()},
            {"seconds", seconds_since(t0)}},
           out);
    return out;
  }

  /// Folds the adapters of `from` (default: latest) into its base weights.
  std::filesystem::path merge(const std::string& from, std::ostream& log = std::cerr) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto input = from.empty() ? latest() : std::filesystem::path(from);
    const LoadedCheckpoint in = load_checkpoint(input.string());
    if (!in.lora) throw LineageError("checkpoint " + input.string() + " has no adapters to merge");
    const std::string in_stage = in.meta.value("stage", "unknown");
    const std::string out_stage = in_stage + "-merged";
    std::vector<std::string> lineage = in.meta.value("lineage", std::vector<std::string>{});
    lineage.push_back(in_stage);
    const auto out = checkpoint_path(out_stage);
    save_checkpoint(merge_lora(in.adapted()), out.string(),
                    stage_meta(out_stage, lineage, in.meta.value("overrides", std::vector<std::string>{})));
    record({{"stage", out_stage}, {"input", input.string()}, {"input_stage", in_stage}, {"output", relative(out)},
            {"seconds", seconds_since(t0)}},
           out);
    log_line(log, "info", {{"cmd", "merge-lora"}, {"input", input.string()}, {"output", out.string()}});
    return out;
  }

  void write_report(const std::string& name, const nlohmann::json& report) const {
    write_text(dir_ / "reports" / name, report.dump(2) + "\n");
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  static void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
  }

  static std::string require_path(const std::string& p, const char* key) {
    if (p.empty()) throw UsageError(std::string("missing config keys: ") + key);
    return p;
  }

  std::uint64_t stage_seed(Stage s) const { return splitmix64(config_.seed ^ (static_cast<std::uint64_t>(s) + 1)); }

  std::size_t steps_of(Stage s, const StageOptions& opts) const {
    if (opts.steps) return *opts.steps;
    switch (s) {
      case Stage::Mntp: return config_.mntp.train.steps;
      case Stage::Simcse: return config_.simcse.train.steps;
      case Stage::Supervised: return config_.supervised.train.steps;
    }
    return 0;
  }

  TrainConfig train_config(StageTrain t, Stage s, const StageOptions& opts) const {
    if (opts.steps) {
      t.steps = *opts.steps;
      if (t.warmup && *t.warmup > t.steps) t.warmup = t.steps / 10;
    }
    return t.resolve(stage_seed(s));
  }

  nlohmann::json stage_meta(const std::string& stage, const std::vector<std::string>& lineage,
                            const std::vector<std::string>& overrides) const {
    return {{"stage", stage}, {"lineage", lineage}, {"overrides", overrides}, {"config_hash", hash()},
            {"seed", config_.seed}};
  }

  std::string relative(const std::filesystem::path& p) const {
    return std::filesystem::relative(p, dir_).string();
  }

  void record(nlohmann::json entry, const std::optional<std::filesystem::path>& output) {
    manifest_["stages"].push_back(std::move(entry));
    if (output) manifest_["latest"] = relative(*output);
    save_manifest();
  }

  void save_manifest() const { write_text(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

  std::filesystem::path dir_;
  RunConfig config_;
  std::string version_;
  nlohmann::json manifest_;
};

/// Calls `fn` with the checkpoint's model: adapted when it carries adapters.
template <class Fn>
decltype(auto) with_model(const LoadedCheckpoint& ck, Fn&& fn) {
  if (ck.lora) {
    const AdaptedModel<float> m = ck.adapted();
    return fn(m);
  }
  return fn(ck.model);
}

}  // namespace l2v
