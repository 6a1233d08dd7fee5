#pragma once

// End-to-end orchestration: configuration, artifact layout, run manifests and
// one function per CLI verb. Every command is a function of (config, input
// files, seed); stages never retrain their prerequisites.

#include "dchat/dialogue.hpp"
#include "dchat/disentangle.hpp"
#include "dchat/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dchat {

namespace fs = std::filesystem;

/// Exit statuses shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitGateFail = 2;

struct PipelineConfig {
  // [paths]
  fs::path raw_corpus = "data/raw.jsonl";
  fs::path lexicons = "data/lexicons";
  fs::path out_dir = "runs/default";
  // [run]
  std::uint64_t seed = 1;
  // [corpus]
  std::size_t max_len = 50;
  double test_fraction = 0.1;
  std::size_t fairness_pairs = 300;
  std::size_t vocab_size = 5000;
  int sentiment_threshold = 1;
  // [synthetic]
  BiasedDialogueOptions synthetic;
  // [disentangle]
  DetConfig det;
  // [dialogue]
  Seq2SeqConfig seq;
  int pretrain_epochs = 10;
  // [gumbel]
  GumbelSchedule gumbel;
  // [adversarial]
  AdvConfig adv;
  // [baselines]
  double wer_k = 0.25;

  /// INI text with [section] headers and key = value lines; '#' and ';'
  /// start comments. Unknown sections or keys are rejected. Keys absent
  /// from the text keep their defaults.
  static PipelineConfig parse(const std::string& text);
  static PipelineConfig load(const fs::path& path);
  /// Every key with its resolved value, in canonical order.
  [[nodiscard]] std::string to_ini() const;
  [[nodiscard]] nlohmann::json to_json() const;
  void validate() const;

  /// SHA-1 over the resolved settings that determine a stage's artifacts:
  /// "corpora", "disentangle", "pretrain", "cda", "wer" or "debiased".
  [[nodiscard]] std::string stage_hash(std::string_view stage) const;
};

/// Hex SHA-1 of arbitrary bytes.
std::string sha1_hex(std::string_view bytes);
/// Git blob id of a file: SHA-1 over "blob <size>\0<content>".
std::string git_blob_hash(const fs::path& path);

struct RunManifest {
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, blob hash
  std::vector<std::string> checkpoints;
  std::string metrics_log;

  void add_input(const fs::path& path);
  [[nodiscard]] nlohmann::json to_json() const;
  void write(const fs::path& path) const;
};

/// File locations under the output directory.
struct Layout {
  fs::path root;

  [[nodiscard]] fs::path corpora() const { return root / "corpora"; }
  [[nodiscard]] fs::path unbiased() const { return corpora() / "unbiased.jsonl"; }
  [[nodiscard]] fs::path gendered() const { return corpora() / "gendered.jsonl"; }
  [[nodiscard]] fs::path neutral() const { return corpora() / "neutral.jsonl"; }
  [[nodiscard]] fs::path fairness() const { return corpora() / "fairness.jsonl"; }
  [[nodiscard]] fs::path train() const { return corpora() / "train.jsonl"; }
  [[nodiscard]] fs::path test() const { return corpora() / "test.jsonl"; }
  [[nodiscard]] fs::path vocab() const { return corpora() / "vocab.txt"; }
  [[nodiscard]] fs::path counts() const { return corpora() / "counts.json"; }
  [[nodiscard]] fs::path checkpoint(std::string_view stage) const;
  [[nodiscard]] fs::path metrics(std::string_view stage) const;
  [[nodiscard]] fs::path manifest(std::string_view stage) const;
  [[nodiscard]] fs::path reports() const { return root / "reports"; }
};

/// Counts written by build-corpora.
struct CorpusCounts {
  std::size_t raw = 0;
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t unbiased = 0;
  std::size_t unbiased_male = 0;
  std::size_t unbiased_female = 0;
  std::size_t gendered = 0;
  std::size_t neutral = 0;
  std::size_t fairness = 0;
  std::size_t vocab = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

enum class EvalWhich { fairness, quality, both };
EvalWhich parse_eval_which(std::string_view s);

struct EvalOptions {
  std::vector<std::string> models = {"pretrain"};
  EvalWhich which = EvalWhich::both;
  bool force = false;
};

struct ChatOptions {
  std::vector<std::string> models = {"pretrain"};
  fs::path input;
  fs::path output;  // defaults to <out>/chat.jsonl
  bool paired = false;
  bool force = false;
};

int cmd_make_synthetic(const PipelineConfig& cfg);
int cmd_build_corpora(const PipelineConfig& cfg, CorpusCounts* counts = nullptr);
int cmd_train_disentangle(const PipelineConfig& cfg);
int cmd_pretrain(const PipelineConfig& cfg);
int cmd_train_debiased(const PipelineConfig& cfg);
int cmd_train_cda(const PipelineConfig& cfg);
int cmd_train_wer(const PipelineConfig& cfg);
int cmd_eval(const PipelineConfig& cfg, const EvalOptions& opts);
int cmd_chat(const PipelineConfig& cfg, const ChatOptions& opts);
int cmd_export_features(const PipelineConfig& cfg, const fs::path& output, bool force);

/// Loads a dialogue checkpoint by stage name or path and checks its config
/// hash against `cfg` unless `force`.
Seq2Seq load_dialogue_model(const PipelineConfig& cfg, const std::string& model, bool force, Vocabulary* vocab);

}  // namespace dchat
