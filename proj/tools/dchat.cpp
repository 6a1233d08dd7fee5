// dchat: command-line driver for the debiasing pipeline.

#include "dchat/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <exception>
#include <iostream>
#include <optional>

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool verbose = false;
};

dchat::PipelineConfig resolve(const Globals& g) {
  dchat::PipelineConfig cfg = g.config.empty() ? dchat::PipelineConfig{} : dchat::PipelineConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gender-debiased dialogue generation pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed (overrides [run] seed)");
  app.add_option("--out", g.out, "Output directory (overrides [paths] out)");
  app.add_flag("--force", g.force, "Accept checkpoints trained under a different config");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  auto* synth = app.add_subcommand("make-synthetic", "Write a synthetic biased dialogue corpus to [paths] raw_corpus");
  auto* build = app.add_subcommand("build-corpora", "Derive the unbiased, gendered, neutral and fairness corpora");
  auto* det = app.add_subcommand("train-disentangle", "Train the disentanglement model");
  auto* pre = app.add_subcommand("pretrain", "MLE-pretrain the dialogue model");
  auto* deb = app.add_subcommand("train-debiased", "Adversarial debiasing (exit 2 when the fairness gate fails)");
  auto* cda = app.add_subcommand("train-cda", "Counterpart data augmentation baseline");
  auto* wer = app.add_subcommand("train-wer", "Word-embedding regularization baseline");

  auto* eval = app.add_subcommand("eval", "Fairness and quality reports");
  dchat::EvalOptions eval_opts;
  std::string which = "both";
  eval->add_option("--model", eval_opts.models, "Stage name (pretrain, debiased, cda, wer) or checkpoint path")
      ->expected(1, -1);
  eval->add_option("--which", which, "fairness, quality or both")
      ->check(CLI::IsMember({"fairness", "quality", "both"}));

  auto* chat = app.add_subcommand("chat", "Greedy responses for each line of an input file");
  dchat::ChatOptions chat_opts;
  chat->add_option("--model", chat_opts.models, "Stage name or checkpoint path; repeat to compare")->expected(1, -1);
  std::string chat_in;
  std::string chat_out;
  chat->add_option("--input", chat_in, "One message per line")->required()->check(CLI::ExistingFile);
  chat->add_option("--output", chat_out, "JSON-lines output (default <out>/chat.jsonl)");
  chat->add_flag("--paired", chat_opts.paired, "Also respond to the gender-swapped message");

  auto* feat = app.add_subcommand("export-features", "Write disentangled features of the unbiased corpus as CSV");
  std::string feat_out;
  feat->add_option("--output", feat_out, "CSV path (default <out>/reports/features.csv)");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    const dchat::PipelineConfig cfg = resolve(g);
    if (synth->parsed()) return dchat::cmd_make_synthetic(cfg);
    if (build->parsed()) return dchat::cmd_build_corpora(cfg);
    if (det->parsed()) return dchat::cmd_train_disentangle(cfg);
    if (pre->parsed()) return dchat::cmd_pretrain(cfg);
    if (deb->parsed()) return dchat::cmd_train_debiased(cfg);
    if (cda->parsed()) return dchat::cmd_train_cda(cfg);
    if (wer->parsed()) return dchat::cmd_train_wer(cfg);
    if (eval->parsed()) {
      eval_opts.which = dchat::parse_eval_which(which);
      eval_opts.force = g.force;
      return dchat::cmd_eval(cfg, eval_opts);
    }
    if (chat->parsed()) {
      chat_opts.input = chat_in;
      chat_opts.output = chat_out;
      chat_opts.force = g.force;
      return dchat::cmd_chat(cfg, chat_opts);
    }
    if (feat->parsed()) return dchat::cmd_export_features(cfg, feat_out, g.force);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return dchat::kExitError;
  }
  return dchat::kExitError;
}
