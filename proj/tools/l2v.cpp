// l2v: command-line front end for the staged embedding pipeline.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "l2v/analysis.hpp"
#include "l2v/pipeline.hpp"
#include "l2v/probe.hpp"
#include "l2v/selfcheck.hpp"

#ifndef L2V_VERSION
#define L2V_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace l2v;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::string checkpoint;
};

RunDirectory open_run(const Common& c) {
  if (c.config.empty()) throw UsageError("missing --config");
  RunConfig cfg = load_run_config(c.config);
  const std::string dir = !c.out.empty() ? c.out : cfg.paths.run_dir;
  return RunDirectory(dir, std::move(cfg), L2V_VERSION);
}

LoadedCheckpoint open_checkpoint(const RunDirectory& run, const Common& c) {
  const fs::path p = c.checkpoint.empty() ? run.latest() : fs::path(c.checkpoint);
  if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
  return load_checkpoint(p.string());
}

void add_common(CLI::App* sub, Common& c, bool with_checkpoint) {
  sub->add_option("--config", c.config, "run config (JSON)")->required();
  sub->add_option("--out", c.out, "run directory (default: paths.run_dir)");
  if (with_checkpoint) sub->add_option("--checkpoint", c.checkpoint, "checkpoint to read (default: latest)");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

struct EmbedArgs {
  std::vector<std::string> texts;
  std::string input;
  std::string instruction;
  std::string pooling = "mean";
  std::string mode = "bidirectional";
  std::string format = "csv";
  std::string output;
};

void add_embed_options(CLI::App* sub, EmbedArgs& a, bool echo) {
  sub->add_option("--text", a.texts, "text to embed (repeatable)");
  sub->add_option("--input", a.input, "file with one text per line");
  sub->add_option("--instruction", a.instruction, "instruction prefix, excluded from pooling");
  sub->add_option("--pooling", a.pooling)->check(CLI::IsMember({"mean", "weighted-mean", "eos"}));
  if (echo) {
    a.mode = "causal";
    sub->add_option("--mode", a.mode, "attention mode (echo embeddings accept causal only)");
  } else {
    sub->add_option("--mode", a.mode)->check(CLI::IsMember({"causal", "bidirectional"}));
  }
  sub->add_option("--format", a.format)->check(CLI::IsMember({"csv", "bin"}));
  sub->add_option("--output", a.output, "output file (csv default: stdout)");
}

int run_embed(const Common& c, const EmbedArgs& a, bool echo) {
  RunDirectory run = open_run(c);
  const Vocab vocab = run.vocab();
  const LoadedCheckpoint ck = open_checkpoint(run, c);
  std::vector<std::string> texts = a.texts;
  if (!a.input.empty()) {
    for (auto& s : load_sentences(a.input)) texts.push_back(std::move(s));
  }
  if (texts.empty()) throw UsageError("nothing to embed: pass --text or --input");
  const PoolingMode pooling = parse_pooling(a.pooling);
  const AttentionMode mode = parse_attention_mode(a.mode);

  std::vector<std::vector<float>> rows;
  with_model(ck, [&](const auto& model) {
    for (const auto& t : texts) {
      const EmbeddingRequest req{a.instruction, t, pooling, mode};
      rows.push_back(echo ? embed_echo(model, req, vocab).vector : embed(model, req, vocab).vector);
    }
    return 0;
  });
  const std::size_t dim = rows.front().size();

  if (a.format == "bin") {
    if (a.output.empty()) throw UsageError("--format bin needs --output");
    std::ofstream out(a.output, std::ios::binary);
    if (!out) throw Error("cannot write " + a.output);
    for (const auto& r : rows) {
      for (float v : r) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 4; ++b) out.put(static_cast<char>((bits >> (8 * b)) & 0xff));
      }
    }
    std::ofstream side(a.output + ".json");
    side << nlohmann::json{{"count", rows.size()}, {"dim", dim}, {"dtype", "f32le"}}.dump() << "\n";
  } else {
    std::ofstream file;
    if (!a.output.empty()) {
      file.open(a.output);
      if (!file) throw Error("cannot write " + a.output);
    }
    std::ostream& out = a.output.empty() ? std::cout : file;
    out << std::setprecision(std::numeric_limits<float>::max_digits10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out << i;
      for (float v : rows[i]) out << ',' << v;
      out << '\n';
    }
  }
  log_line(std::cerr, "info", {{"cmd", echo ? "embed-echo" : "embed"}, {"count", std::to_string(rows.size())},
                               {"dim", std::to_string(dim)}, {"pooling", a.pooling}, {"mode", a.mode}});
  return 0;
}

int run_gradcheck(const std::string& dtype, std::uint64_t seed) {
  auto report = [&](const std::vector<LossCheck>& checks) {
    bool ok = true;
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : checks) {
      ok &= c.report.pass;
      j.push_back(to_json(c));
      log_line(std::cerr, c.report.pass ? "info" : "error",
               {{"cmd", "gradcheck"}, {"dtype", dtype}, {"loss", c.loss}, {"max_rel_err", fmt(c.report.max_rel_err)},
                {"pass", c.report.pass ? "true" : "false"}});
    }
    std::cout << j.dump(2) << "\n";
    return ok ? 0 : 1;
  };
  if (dtype == "f64") return report(check_loss_gradients<double>(seed, loss_check_options<double>(seed)));
  return report(check_loss_gradients<float>(seed, loss_check_options<float>(seed)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"l2v: bidirectional adaptation of decoder-only language models into text encoders"};
  app.set_version_flag("--version", L2V_VERSION);
  app.require_subcommand(1);

  Common common;

  auto* tok = app.add_subcommand("tokenizer-train", "train or load the BPE vocabulary");
  add_common(tok, common, false);

  auto* init = app.add_subcommand("init", "tokenizer plus seeded base model");
  add_common(init, common, false);

  auto* train = app.add_subcommand("train", "train one LoRA stage");
  add_common(train, common, false);
  std::string stage_name;
  StageOptions stage_opts;
  std::size_t steps = 0;
  train->add_option("stage", stage_name, "mntp | simcse | supervised")
      ->required()
      ->check(CLI::IsMember({"mntp", "simcse", "supervised"}));
  train->add_option("--from", stage_opts.from, "input checkpoint (default: the stage's expected input)");
  train->add_option("--steps", steps, "override the configured step count")->check(CLI::PositiveNumber);
  train->add_flag("--allow-skip", stage_opts.allow_skip, "accept an out-of-order input, recorded in the manifest");
  train->add_option("--log-every", stage_opts.log_every)->check(CLI::PositiveNumber);

  auto* merge = app.add_subcommand("merge-lora", "fold adapters into the base weights");
  add_common(merge, common, false);
  std::string merge_from;
  merge->add_option("--from", merge_from, "checkpoint with adapters (default: latest)");

  EmbedArgs embed_args, echo_args;
  auto* emb = app.add_subcommand("embed", "sequence embeddings");
  add_common(emb, common, true);
  add_embed_options(emb, embed_args, false);
  auto* echo = app.add_subcommand("embed-echo", "echo-embedding baseline (causal)");
  add_common(echo, common, true);
  add_embed_options(echo, echo_args, true);

  auto* probe = app.add_subcommand("probe", "word-level linear probe on frozen representations");
  add_common(probe, common, true);
  std::string probe_corpus, probe_mode = "bidirectional", probe_task_name;
  bool shifted = false;
  ProbeConfig probe_cfg;
  probe->add_option("--corpus", probe_corpus, "token<TAB>label file, blank line between sentences")->required();
  probe->add_option("--mode", probe_mode)->check(CLI::IsMember({"causal", "bidirectional"}));
  probe->add_flag("--shifted", shifted, "represent each word by the tokens one position earlier");
  probe->add_option("--steps", probe_cfg.steps)->check(CLI::PositiveNumber);
  probe->add_option("--lr", probe_cfg.lr);
  probe->add_option("--seed", probe_cfg.seed);
  probe->add_option("--task", probe_task_name, "report name (default: corpus file stem)");

  auto* analyze = app.add_subcommand("analyze", "diagnostics");
  analyze->require_subcommand(1);
  auto* triples = analyze->add_subcommand("triples", "prefix-triple similarity");
  add_common(triples, common, true);
  std::string triples_path, an_pooling = "mean", an_mode = "bidirectional";
  triples->add_option("--triples", triples_path, "A<TAB>B<TAB>C<TAB>D file")->required();
  triples->add_option("--pooling", an_pooling)->check(CLI::IsMember({"mean", "weighted-mean", "eos"}));
  triples->add_option("--mode", an_mode)->check(CLI::IsMember({"causal", "bidirectional"}));
  auto* layers = analyze->add_subcommand("layers", "causal vs bidirectional cosine per layer and position");
  add_common(layers, common, true);
  std::string layers_text, layers_csv;
  layers->add_option("--text", layers_text, "input text (default: first line of the MNTP corpus)");
  layers->add_option("--output", layers_csv, "CSV path (default: reports/layers.csv)");

  auto* sts = app.add_subcommand("eval-sts", "Spearman correlation of cosine similarity with gold scores");
  add_common(sts, common, true);
  std::string sts_path, sts_pooling = "mean", sts_mode = "bidirectional", sts_instruction;
  sts->add_option("--pairs", sts_path, "sentence1<TAB>sentence2<TAB>score file")->required();
  sts->add_option("--pooling", sts_pooling)->check(CLI::IsMember({"mean", "weighted-mean", "eos"}));
  sts->add_option("--mode", sts_mode)->check(CLI::IsMember({"causal", "bidirectional"}));
  sts->add_option("--instruction", sts_instruction);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the three training losses");
  std::string dtype = "f32";
  std::uint64_t gc_seed = 1;
  gc->add_option("--dtype", dtype)->check(CLI::IsMember({"f32", "f64"}));
  gc->add_option("--seed", gc_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (tok->parsed()) {
      open_run(common).train_tokenizer();
    } else if (init->parsed()) {
      open_run(common).init();
    } else if (train->parsed()) {
      if (steps > 0) stage_opts.steps = steps;
      const fs::path out = open_run(common).train(parse_stage(stage_name), stage_opts);
      log_line(std::cerr, "info", {{"cmd", "train"}, {"stage", stage_name}, {"output", out.string()}});
    } else if (merge->parsed()) {
      open_run(common).merge(merge_from);
    } else if (emb->parsed()) {
      return run_embed(common, embed_args, false);
    } else if (echo->parsed()) {
      return run_embed(common, echo_args, true);
    } else if (probe->parsed()) {
      RunDirectory run = open_run(common);
      const Vocab vocab = run.vocab();
      const LoadedCheckpoint ck = open_checkpoint(run, common);
      const auto corpus = load_token_labels(probe_corpus);
      const AttentionMode mode = parse_attention_mode(probe_mode);
      const std::string task = probe_task_name.empty() ? fs::path(probe_corpus).stem().string() : probe_task_name;
      const ProbeReport r = with_model(ck, [&](const auto& model) {
        return probe_task(model, vocab, corpus, mode, shifted, probe_cfg, task);
      });
      const nlohmann::json j = r.to_json();
      run.write_report("probe-" + task + "-" + probe_mode + (shifted ? "-shifted" : "") + ".json", j);
      std::cout << j.dump(2) << "\n";
    } else if (triples->parsed()) {
      RunDirectory run = open_run(common);
      const Vocab vocab = run.vocab();
      const LoadedCheckpoint ck = open_checkpoint(run, common);
      const auto data = load_triples(triples_path);
      const TripleReport r = with_model(ck, [&](const auto& model) {
        return prefix_triple_similarity(model, vocab, data, parse_pooling(an_pooling), parse_attention_mode(an_mode));
      });
      nlohmann::json j = r.to_json();
      j["pooling"] = an_pooling;
      j["mode"] = an_mode;
      run.write_report("triples-" + an_mode + ".json", j);
      std::cout << j.dump(2) << "\n";
    } else if (layers->parsed()) {
      RunDirectory run = open_run(common);
      const Vocab vocab = run.vocab();
      const LoadedCheckpoint ck = open_checkpoint(run, common);
      std::string text = layers_text;
      if (text.empty()) {
        const std::string corpus = run.config().paths.mntp_corpus;
        if (corpus.empty()) throw UsageError("analyze layers needs --text or paths.mntp_corpus");
        text = load_sentences(corpus).at(0);
      }
      const LayerSimMatrix m = with_model(ck, [&](const auto& model) {
        return layerwise_mask_similarity(model, vocab, text);
      });
      const std::string path = layers_csv.empty() ? (run.dir() / "reports" / "layers.csv").string() : layers_csv;
      m.write_csv(path);
      log_line(std::cerr, "info", {{"cmd", "analyze layers"}, {"layers", std::to_string(m.layers)},
                                   {"positions", std::to_string(m.positions)}, {"output", path}});
    } else if (sts->parsed()) {
      RunDirectory run = open_run(common);
      const Vocab vocab = run.vocab();
      const LoadedCheckpoint ck = open_checkpoint(run, common);
      const auto pairs = load_scored_pairs(sts_path);
      const StsReport r = with_model(ck, [&](const auto& model) {
        return sts_eval(model, vocab, pairs, parse_pooling(sts_pooling), parse_attention_mode(sts_mode),
                        sts_instruction);
      });
      const nlohmann::json j = {{"spearman", r.spearman}, {"n_pairs", r.n_pairs}, {"pooling", sts_pooling},
                                {"mode", sts_mode}};
      run.write_report("sts-" + sts_mode + ".json", j);
      std::cout << j.dump(2) << "\n";
    } else if (gc->parsed()) {
      return run_gradcheck(dtype, gc_seed);
    }
  } catch (const UsageError& e) {
    log_line(std::cerr, "error", {{"kind", "usage"}, {"msg", e.what()}});
    return 2;
  } catch (const ConfigError& e) {
    log_line(std::cerr, "error", {{"kind", "usage"}, {"msg", e.what()}});
    return 2;
  } catch (const Error& e) {
    log_line(std::cerr, "error", {{"kind", "domain"}, {"msg", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    log_line(std::cerr, "error", {{"kind", "internal"}, {"msg", e.what()}});
    return 1;
  }
  return 0;
}
