#include "dchat/pipeline.hpp"

#include "dchat/random.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace dchat {

namespace {

// ---- configuration registry ---------------------------------------------------

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad value for " + key + ": '" + v + "'");
  } else {
    T out{};
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("config: bad value for " + key + ": '" + v + "'");
    return out;
  }
}

std::string format_double(double d) { return fmt::format("{}", d); }

struct Field {
  std::string section;
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename T>
Field number_field(std::string section, std::string key, T PipelineConfig::*member) {
  const std::string full = section + "." + key;
  return {section, key, [member, full](PipelineConfig& c, const std::string& v) { c.*member = parse_number<T>(full, v); },
          [member](const PipelineConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <typename Outer, typename T>
Field nested_field(std::string section, std::string key, Outer PipelineConfig::*outer, T Outer::*member) {
  const std::string full = section + "." + key;
  return {section, key,
          [outer, member, full](PipelineConfig& c, const std::string& v) { (c.*outer).*member = parse_number<T>(full, v); },
          [outer, member](const PipelineConfig& c) {
            if constexpr (std::is_same_v<T, bool>) {
              return std::string((c.*outer).*member ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<T>) {
              return format_double((c.*outer).*member);
            } else {
              return std::to_string((c.*outer).*member);
            }
          }};
}

Field path_field(std::string section, std::string key, fs::path PipelineConfig::*member) {
  return {section, key, [member](PipelineConfig& c, const std::string& v) { c.*member = v; },
          [member](const PipelineConfig& c) { return (c.*member).string(); }};
}

const std::vector<Field>& registry() {
  using C = PipelineConfig;
  static const std::vector<Field> fields = {
      path_field("paths", "raw_corpus", &C::raw_corpus),
      path_field("paths", "lexicons", &C::lexicons),
      path_field("paths", "out", &C::out_dir),
      number_field("run", "seed", &C::seed),
      number_field("corpus", "max_len", &C::max_len),
      number_field("corpus", "test_fraction", &C::test_fraction),
      number_field("corpus", "fairness_pairs", &C::fairness_pairs),
      number_field("corpus", "vocab_size", &C::vocab_size),
      number_field("corpus", "sentiment_threshold", &C::sentiment_threshold),
      nested_field("synthetic", "n_gendered", &C::synthetic, &BiasedDialogueOptions::n_gendered),
      nested_field("synthetic", "n_neutral", &C::synthetic, &BiasedDialogueOptions::n_neutral),
      nested_field("synthetic", "female_bias_rate", &C::synthetic, &BiasedDialogueOptions::female_bias_rate),
      nested_field("disentangle", "embed_dim", &C::det, &DetConfig::embed_dim),
      nested_field("disentangle", "d", &C::det, &DetConfig::hidden_dim),
      nested_field("disentangle", "u", &C::det, &DetConfig::gender_dim),
      nested_field("disentangle", "s", &C::det, &DetConfig::semantic_dim),
      nested_field("disentangle", "k1", &C::det, &DetConfig::k1),
      nested_field("disentangle", "k2", &C::det, &DetConfig::k2),
      nested_field("disentangle", "k3", &C::det, &DetConfig::k3),
      nested_field("disentangle", "k4", &C::det, &DetConfig::k4),
      nested_field("disentangle", "n_epoch", &C::det, &DetConfig::n_epoch),
      nested_field("disentangle", "batch_size", &C::det, &DetConfig::batch_size),
      nested_field("disentangle", "lr", &C::det, &DetConfig::lr),
      nested_field("disentangle", "adversary_steps", &C::det, &DetConfig::adversary_steps),
      nested_field("disentangle", "adversary_lr", &C::det, &DetConfig::adversary_lr),
      nested_field("disentangle", "adversary_l2", &C::det, &DetConfig::adversary_l2),
      nested_field("disentangle", "adversary_buffer", &C::det, &DetConfig::adversary_buffer),
      nested_field("disentangle", "detach_adversarial_terms", &C::det, &DetConfig::detach_adversarial_terms),
      nested_field("dialogue", "embed_dim", &C::seq, &Seq2SeqConfig::embed_dim),
      nested_field("dialogue", "hidden_dim", &C::seq, &Seq2SeqConfig::hidden_dim),
      nested_field("dialogue", "num_layers", &C::seq, &Seq2SeqConfig::num_layers),
      nested_field("dialogue", "max_decode_len", &C::seq, &Seq2SeqConfig::max_decode_len),
      nested_field("dialogue", "batch_size", &C::seq, &Seq2SeqConfig::batch_size),
      nested_field("dialogue", "sgd_lr", &C::seq, &Seq2SeqConfig::sgd_lr),
      nested_field("dialogue", "clip_norm", &C::seq, &Seq2SeqConfig::clip_norm),
      number_field("dialogue", "pretrain_epochs", &C::pretrain_epochs),
      nested_field("gumbel", "tau0", &C::gumbel, &GumbelSchedule::tau0),
      nested_field("gumbel", "divisor", &C::gumbel, &GumbelSchedule::divisor),
      nested_field("gumbel", "interval", &C::gumbel, &GumbelSchedule::interval),
      nested_field("gumbel", "floor", &C::gumbel, &GumbelSchedule::floor),
      nested_field("adversarial", "kp1", &C::adv, &AdvConfig::kp1),
      nested_field("adversarial", "kp2", &C::adv, &AdvConfig::kp2),
      nested_field("adversarial", "d_steps", &C::adv, &AdvConfig::d_steps),
      nested_field("adversarial", "g_steps", &C::adv, &AdvConfig::g_steps),
      nested_field("adversarial", "g_teach_steps", &C::adv, &AdvConfig::g_teach_steps),
      nested_field("adversarial", "batch_size", &C::adv, &AdvConfig::batch_size),
      nested_field("adversarial", "max_loops", &C::adv, &AdvConfig::max_loops),
      nested_field("adversarial", "gate_every", &C::adv, &AdvConfig::gate_every),
      nested_field("adversarial", "lr", &C::adv, &AdvConfig::lr),
      nested_field("adversarial", "disc_hidden", &C::adv, &AdvConfig::disc_hidden),
      number_field("baselines", "wer_k", &C::wer_k),
  };
  return fields;
}

nlohmann::json sections_json(const PipelineConfig& c, std::initializer_list<std::string_view> sections) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : registry()) {
    for (auto s : sections) {
      if (f.section == s) j[f.section][f.key] = f.get(c);
    }
  }
  return j;
}

// ---- file helpers ----------------------------------------------------------------

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) {
    fs::create_directories(path.parent_path());
    os_.open(path, std::ios::trunc);
    if (!os_) throw std::runtime_error("cannot write metrics log " + path.string());
  }
  void write(const nlohmann::json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

void require(const fs::path& path, std::string_view producer) {
  if (!fs::exists(path)) {
    throw std::runtime_error(fmt::format("missing prerequisite {} (run `dchat {}` first)", path.string(), producer));
  }
}

void log_resolved(const PipelineConfig& cfg, std::string_view command) {
  spdlog::info("{}: resolved config\n{}", command, cfg.to_ini());
  write_text(cfg.out_dir / "config.resolved.ini", cfg.to_ini());
}

std::uint64_t derived_seed(std::uint64_t seed, std::string_view name) { return substream(seed, name)(); }

Lexicons load_lexicons(const PipelineConfig& cfg) {
  if (!fs::is_directory(cfg.lexicons)) throw std::runtime_error("lexicon directory not found: " + cfg.lexicons.string());
  return Lexicons::load(cfg.lexicons);
}

std::vector<DialoguePair> read_pairs_jsonl(const fs::path& path) { return read_dialogues(path, SIZE_MAX); }

Checkpoint load_stage_checkpoint(const Layout& layout, std::string_view stage,
                                 std::string_view producer) {
  const fs::path path = layout.checkpoint(stage);
  require(path, producer);
  return load_checkpoint(path);
}

void check_hash(const Checkpoint& ckpt, const PipelineConfig& cfg, std::string_view stage, bool force) {
  const std::string expected = cfg.stage_hash(stage);
  const std::string stored = ckpt.config.value("config_hash", std::string());
  if (stored == expected) return;
  if (force) {
    spdlog::warn("{} checkpoint config hash {} differs from current {}; continuing (--force)", stage, stored, expected);
    return;
  }
  throw std::runtime_error(fmt::format(
      "{} checkpoint was trained under config hash {} but the current config hashes to {}; pass --force to override",
      stage, stored, expected));
}

DetModel load_det(const PipelineConfig& cfg, const Layout& layout, bool force) {
  const Checkpoint ckpt = load_stage_checkpoint(layout, "det", "train-disentangle");
  check_hash(ckpt, cfg, "disentangle", force);
  return DetModel::from_checkpoint(ckpt, force ? nullptr : &cfg.det);
}

Vocabulary load_vocab(const Layout& layout) {
  require(layout.vocab(), "build-corpora");
  return Vocabulary::load(layout.vocab());
}

void save_dialogue(const PipelineConfig& cfg, const Layout& layout, const Seq2Seq& g, const Vocabulary& vocab,
                   std::string_view stage) {
  Checkpoint c = g.to_checkpoint(vocab, std::string(stage));
  c.config["config_hash"] = cfg.stage_hash(stage);
  save_checkpoint(layout.checkpoint(stage), c);
}

nlohmann::json epoch_json(std::string_view stage, const EpochLog& e) {
  return {{"stage", stage}, {"epoch", e.epoch}, {"loss", e.loss}, {"perplexity", e.perplexity},
          {"regularizer", e.regularizer}};
}

int train_dialogue_stage(const PipelineConfig& cfg, std::string_view stage, const std::vector<DialoguePair>& corpus,
                         const std::vector<std::pair<int, int>>* wer_pairs, const Vocabulary& vocab,
                         RunManifest& manifest) {
  const Layout layout{cfg.out_dir};
  const auto examples = encode_dialogues(corpus, vocab);
  if (examples.empty()) throw std::runtime_error(fmt::format("{}: training corpus is empty", stage));
  Seq2Seq g(cfg.seq, vocab.size(), derived_seed(cfg.seed, std::string(stage) + ".init"));
  JsonlLog log(layout.metrics(stage));
  MleOptions opts;
  opts.epochs = cfg.pretrain_epochs;
  opts.seed = derived_seed(cfg.seed, std::string(stage) + ".batches");
  opts.on_epoch = [&](const EpochLog& e) {
    log.write(epoch_json(stage, e));
    spdlog::info("{} epoch {}: loss={:.4f} ppl={:.3f}{}", stage, e.epoch, e.loss, e.perplexity,
                 wer_pairs ? fmt::format(" pair distance={:.5f}", e.regularizer) : "");
  };
  if (wer_pairs != nullptr) {
    const double before = counterpart_distance(g, *wer_pairs);
    log.write({{"stage", stage}, {"event", "init"}, {"pair_distance", before}, {"pairs", wer_pairs->size()}});
    spdlog::info("wer: {} resolvable pairs, initial mean pair distance {:.5f}", wer_pairs->size(), before);
    train_wer(g, examples, *wer_pairs, {opts, cfg.wer_k});
  } else {
    pretrain_mle(g, examples, opts);
  }
  save_dialogue(cfg, layout, g, vocab, stage);
  manifest.checkpoints.push_back(layout.checkpoint(stage).string());
  manifest.metrics_log = layout.metrics(stage).string();
  manifest.write(layout.manifest(stage));
  return kExitOk;
}

RunManifest start_manifest(const PipelineConfig& cfg, std::string_view stage) {
  RunManifest m;
  m.stage = stage;
  m.seed = cfg.seed;
  m.config_hash = cfg.stage_hash(stage);
  return m;
}

}  // namespace

// ---- PipelineConfig -------------------------------------------------------------

PipelineConfig PipelineConfig::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  PipelineConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw std::invalid_argument("config: key '" + section + "' must be inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const auto& fields = registry();
      auto it = std::find_if(fields.begin(), fields.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) throw std::invalid_argument("config: unknown key " + section + "." + key);
      it->set(c, value.data());
    }
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string PipelineConfig::to_ini() const {
  std::string out;
  std::string section;
  for (const auto& f : registry()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : registry()) j[f.section][f.key] = f.get(*this);
  return j;
}

void PipelineConfig::validate() const {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("config: test_fraction in [0, 1)");
  if (vocab_size < static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    throw std::invalid_argument("config: vocab_size must be >= 4");
  }
  if (max_len < 1) throw std::invalid_argument("config: max_len must be >= 1");
  if (pretrain_epochs < 0) throw std::invalid_argument("config: pretrain_epochs must be >= 0");
  if (wer_k < 0.0) throw std::invalid_argument("config: wer_k must be >= 0");
  det.validate();
  seq.validate();
  adv.validate();
  (void)gumbel.tau(0);
}

std::string PipelineConfig::stage_hash(std::string_view stage) const {
  nlohmann::json j;
  if (stage == "corpora") {
    j = sections_json(*this, {"run", "corpus"});
  } else if (stage == "disentangle") {
    j = sections_json(*this, {"run", "corpus", "disentangle"});
  } else if (stage == "pretrain") {
    j = sections_json(*this, {"run", "corpus", "dialogue"});
  } else if (stage == "cda" || stage == "wer") {
    j = sections_json(*this, {"run", "corpus", "dialogue", "baselines"});
  } else if (stage == "debiased") {
    j = sections_json(*this, {"run", "corpus", "dialogue", "disentangle", "gumbel", "adversarial"});
  } else {
    throw std::invalid_argument("unknown stage: " + std::string(stage));
  }
  j["stage"] = stage;
  return sha1_hex(j.dump());
}

// ---- hashing and manifests -----------------------------------------------------------

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string git_blob_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string content = ss.str();
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob += content;
  return sha1_hex(blob);
}

void RunManifest::add_input(const fs::path& path) { inputs.emplace_back(path.string(), git_blob_hash(path)); }

nlohmann::json RunManifest::to_json() const {
  nlohmann::json in = nlohmann::json::object();
  for (const auto& [p, h] : inputs) in[p] = h;
  return {{"stage", stage},           {"seed", seed},          {"config_hash", config_hash},
          {"inputs", in},             {"checkpoints", checkpoints}, {"metrics_log", metrics_log}};
}

void RunManifest::write(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

fs::path Layout::checkpoint(std::string_view stage) const {
  return root / "checkpoints" / (std::string(stage) + ".ckpt");
}
fs::path Layout::metrics(std::string_view stage) const { return root / "logs" / (std::string(stage) + ".jsonl"); }
fs::path Layout::manifest(std::string_view stage) const {
  return root / "manifests" / (std::string(stage) + ".json");
}

nlohmann::json CorpusCounts::to_json() const {
  return {{"raw", raw},
          {"train", train},
          {"test", test},
          {"unbiased", unbiased},
          {"unbiased_male", unbiased_male},
          {"unbiased_female", unbiased_female},
          {"gendered", gendered},
          {"neutral", neutral},
          {"fairness", fairness},
          {"vocab", vocab}};
}

EvalWhich parse_eval_which(std::string_view s) {
  if (s == "fairness") return EvalWhich::fairness;
  if (s == "quality") return EvalWhich::quality;
  if (s == "both") return EvalWhich::both;
  throw std::invalid_argument("eval target must be fairness, quality or both");
}

// ---- commands --------------------------------------------------------------------------

int cmd_make_synthetic(const PipelineConfig& cfg) {
  log_resolved(cfg, "make-synthetic");
  BiasedDialogueOptions opts = cfg.synthetic;
  opts.seed = derived_seed(cfg.seed, "synthetic");
  const auto dialogues = make_biased_dialogues(opts);
  write_dialogues(cfg.raw_corpus, dialogues);
  spdlog::info("make-synthetic: wrote {} dialogues to {}", dialogues.size(), cfg.raw_corpus.string());
  return kExitOk;
}

int cmd_build_corpora(const PipelineConfig& cfg, CorpusCounts* counts_out) {
  log_resolved(cfg, "build-corpora");
  const Layout layout{cfg.out_dir};
  const Lexicons lex = load_lexicons(cfg);
  const Classifiers cls = Classifiers::from_lexicons(lex.attributes, cfg.sentiment_threshold);
  if (!fs::exists(cfg.raw_corpus)) throw std::runtime_error("raw corpus not found: " + cfg.raw_corpus.string());
  ReadStats stats;
  const auto raw = read_dialogues(cfg.raw_corpus, cfg.max_len, &stats);
  if (raw.empty()) spdlog::warn("build-corpora: raw corpus {} has no usable dialogues", cfg.raw_corpus.string());

  const Split split = split_dialogues(raw, cfg.test_fraction, derived_seed(cfg.seed, "split"));
  const auto unbiased = build_unbiased_utterances(split.train, cls, lex);
  const auto gendered = build_gendered_dialogues(split.train, lex.gender);
  const auto neutral = build_neutral_dialogues(split.train, lex.gender);
  const auto fairness = build_fairness_pairs(split.test, lex.gender, cfg.fairness_pairs, derived_seed(cfg.seed, "fairness"));

  std::vector<Utterance> vocab_corpus;
  for (const auto& d : split.train) {
    vocab_corpus.push_back(d.message);
    vocab_corpus.push_back(d.response);
  }
  const Vocabulary vocab = Vocabulary::build(vocab_corpus, cfg.vocab_size);

  fs::create_directories(layout.corpora());
  write_labeled(layout.unbiased(), unbiased);
  write_gendered(layout.gendered(), gendered);
  write_dialogues(layout.neutral(), neutral);
  write_fairness(layout.fairness(), fairness);
  write_dialogues(layout.train(), split.train);
  write_dialogues(layout.test(), split.test);
  vocab.save(layout.vocab());

  CorpusCounts c;
  c.raw = raw.size();
  c.train = split.train.size();
  c.test = split.test.size();
  c.unbiased = unbiased.size();
  for (const auto& u : unbiased) (u.gender == Gender::male ? c.unbiased_male : c.unbiased_female)++;
  c.gendered = gendered.size();
  c.neutral = neutral.size();
  c.fairness = fairness.size();
  c.vocab = vocab.size();
  write_text(layout.counts(), c.to_json().dump(2) + "\n");
  spdlog::info("raw dialogues: {} ({} lines, {} dropped empty, {} dropped long)", c.raw, stats.lines,
               stats.dropped_empty, stats.dropped_long);
  spdlog::info("split: {} train / {} test", c.train, c.test);
  spdlog::info("unbiased gendered utterances: {} ({} male, {} female)", c.unbiased, c.unbiased_male,
               c.unbiased_female);
  spdlog::info("gendered dialogues: {}; neutral dialogues: {}; fairness pairs: {}; vocabulary: {}", c.gendered,
               c.neutral, c.fairness, c.vocab);

  RunManifest m = start_manifest(cfg, "corpora");
  m.add_input(cfg.raw_corpus);
  for (const char* f : {"gender_pairs.tsv", "male_extra.txt", "female_extra.txt"}) m.add_input(cfg.lexicons / f);
  m.metrics_log = layout.counts().string();
  m.write(layout.manifest("corpora"));
  if (counts_out != nullptr) *counts_out = c;
  return kExitOk;
}

int cmd_train_disentangle(const PipelineConfig& cfg) {
  log_resolved(cfg, "train-disentangle");
  const Layout layout{cfg.out_dir};
  require(layout.unbiased(), "build-corpora");
  const Lexicons lex = load_lexicons(cfg);
  const Vocabulary vocab = load_vocab(layout);
  const auto examples = make_det_examples(read_labeled(layout.unbiased()), vocab, lex);

  DetModel m(cfg.det, vocab.size(), derived_seed(cfg.seed, "det.init"));
  JsonlLog log(layout.metrics("disentangle"));
  DetTrainOptions opts;
  opts.seed = derived_seed(cfg.seed, "det.batches");
  opts.on_epoch = [&](const DetEpochStats& s) {
    log.write({{"stage", "disentangle"}, {"epoch", s.epoch}, {"total", s.total}, {"rec", s.rec}, {"d1", s.d1},
               {"d2", s.d2}, {"d3", s.d3}, {"d4", s.d4}, {"adversary", s.adversary}});
    spdlog::info("disentangle epoch {}: total={:.4f} rec={:.4f} d1={:.4f} d2={:.4f} d3={:.4f} d4={:.4f}", s.epoch,
                 s.total, s.rec, s.d1, s.d2, s.d3, s.d4);
  };
  det_train(m, examples, opts);
  try {
    const auto probe = probe_features(m, examples, derived_seed(cfg.seed, "det.probe"));
    log.write({{"stage", "disentangle"}, {"event", "probe"}, {"f_u", probe.gender_features},
               {"f_s", probe.semantic_features}});
    spdlog::info("gender probe accuracy: f_u={:.4f} f_s={:.4f}", probe.gender_features, probe.semantic_features);
  } catch (const std::invalid_argument& e) {
    spdlog::warn("gender probe skipped: {}", e.what());
  }
  Checkpoint c = m.to_checkpoint(vocab);
  c.config["config_hash"] = cfg.stage_hash("disentangle");
  save_checkpoint(layout.checkpoint("det"), c);

  RunManifest man = start_manifest(cfg, "disentangle");
  man.add_input(layout.unbiased());
  man.add_input(layout.vocab());
  man.checkpoints.push_back(layout.checkpoint("det").string());
  man.metrics_log = layout.metrics("disentangle").string();
  man.write(layout.manifest("disentangle"));
  return kExitOk;
}

int cmd_pretrain(const PipelineConfig& cfg) {
  log_resolved(cfg, "pretrain");
  const Layout layout{cfg.out_dir};
  require(layout.train(), "build-corpora");
  const Vocabulary vocab = load_vocab(layout);
  RunManifest man = start_manifest(cfg, "pretrain");
  man.add_input(layout.train());
  man.add_input(layout.vocab());
  return train_dialogue_stage(cfg, "pretrain", read_pairs_jsonl(layout.train()), nullptr, vocab, man);
}

int cmd_train_cda(const PipelineConfig& cfg) {
  log_resolved(cfg, "train-cda");
  const Layout layout{cfg.out_dir};
  require(layout.train(), "build-corpora");
  const Lexicons lex = load_lexicons(cfg);
  const Vocabulary vocab = load_vocab(layout);
  const auto train = read_pairs_jsonl(layout.train());
  const auto augmented = cda_augment(train, lex.gender);
  spdlog::info("cda: augmented corpus {} = {} original + {} gendered copies", augmented.size(), train.size(),
               augmented.size() - train.size());
  RunManifest man = start_manifest(cfg, "cda");
  man.add_input(layout.train());
  man.add_input(layout.vocab());
  return train_dialogue_stage(cfg, "cda", augmented, nullptr, vocab, man);
}

int cmd_train_wer(const PipelineConfig& cfg) {
  log_resolved(cfg, "train-wer");
  const Layout layout{cfg.out_dir};
  require(layout.train(), "build-corpora");
  const Lexicons lex = load_lexicons(cfg);
  const Vocabulary vocab = load_vocab(layout);
  const auto pairs = resolvable_pairs(lex.gender, vocab);
  if (pairs.empty()) throw std::runtime_error("train-wer: no gender counterpart pair is in the vocabulary");
  RunManifest man = start_manifest(cfg, "wer");
  man.add_input(layout.train());
  man.add_input(layout.vocab());
  return train_dialogue_stage(cfg, "wer", read_pairs_jsonl(layout.train()), &pairs, vocab, man);
}

int cmd_train_debiased(const PipelineConfig& cfg) {
  log_resolved(cfg, "train-debiased");
  const Layout layout{cfg.out_dir};
  for (const auto& p : {layout.gendered(), layout.neutral(), layout.fairness()}) require(p, "build-corpora");
  Vocabulary vocab;
  Seq2Seq pretrained = load_dialogue_model(cfg, "pretrain", false, &vocab);
  DetModel det = load_det(cfg, layout, false);
  if (det.vocab_size() != vocab.size()) {
    throw std::runtime_error("disentanglement and dialogue checkpoints use different vocabularies");
  }
  const Lexicons lex = load_lexicons(cfg);
  const Classifiers cls = Classifiers::from_lexicons(lex.attributes, cfg.sentiment_threshold);
  const auto gendered = encode_dialogues(read_gendered(layout.gendered()), vocab);
  const auto neutral = encode_dialogues(read_pairs_jsonl(layout.neutral()), vocab);
  const auto pairs = read_fairness(layout.fairness());
  if (pairs.size() < 2) throw std::runtime_error("train-debiased: the fairness corpus needs at least two pairs");
  const FairnessContext ctx{&pairs, &vocab, &cls, &lex.attributes};

  JsonlLog log(layout.metrics("debiased"));
  AdvOptions opts;
  opts.seed = derived_seed(cfg.seed, "debiased");
  opts.schedule = cfg.gumbel;
  opts.on_log = [&](const nlohmann::json& j) { log.write(j); };
  AdvResult res = adversarial_train(pretrained, det, gendered, neutral, ctx, cfg.adv, opts);
  const double d1_acc = d1_response_accuracy(res.model, det, res.d1, ctx);
  log.write({{"event", "final"}, {"passed", res.passed}, {"loops", res.loops}, {"min_p", res.gate.report.min_p()},
             {"d1_response_accuracy", d1_acc}});
  spdlog::info("debiased: gate {} after {} loops (min p={:.4g}); D1 accuracy on responses {:.3f}",
               res.passed ? "passed" : "FAILED", res.loops, res.gate.report.min_p(), d1_acc);
  save_dialogue(cfg, layout, res.model, vocab, "debiased");
  write_text(layout.reports() / "debiased_gate.json", res.gate.report.to_json().dump(2) + "\n");
  write_text(layout.reports() / "debiased_gate.txt", res.gate.report.to_text());

  RunManifest man = start_manifest(cfg, "debiased");
  for (const auto& p : {layout.gendered(), layout.neutral(), layout.fairness(), layout.checkpoint("pretrain"),
                        layout.checkpoint("det")}) {
    man.add_input(p);
  }
  man.checkpoints.push_back(layout.checkpoint("debiased").string());
  man.metrics_log = layout.metrics("debiased").string();
  man.write(layout.manifest("debiased"));
  return res.passed ? kExitOk : kExitGateFail;
}

Seq2Seq load_dialogue_model(const PipelineConfig& cfg, const std::string& model, bool force, Vocabulary* vocab) {
  const Layout layout{cfg.out_dir};
  const bool is_stage = model == "pretrain" || model == "debiased" || model == "cda" || model == "wer";
  fs::path path = is_stage ? layout.checkpoint(model) : fs::path(model);
  if (is_stage) {
    static const std::map<std::string, std::string> producers = {
        {"pretrain", "pretrain"}, {"debiased", "train-debiased"}, {"cda", "train-cda"}, {"wer", "train-wer"}};
    require(path, producers.at(model));
  } else if (!fs::exists(path)) {
    throw std::runtime_error("checkpoint not found: " + path.string());
  }
  const Checkpoint ckpt = load_checkpoint(path);
  const std::string stage = ckpt.config.value("stage", std::string());
  if (stage.empty()) throw std::runtime_error(path.string() + ": checkpoint has no stage tag");
  check_hash(ckpt, cfg, stage, force);
  if (vocab != nullptr) *vocab = Vocabulary::from_tokens(ckpt.vocab);
  return Seq2Seq::from_checkpoint(ckpt, force ? nullptr : &cfg.seq);
}

int cmd_eval(const PipelineConfig& cfg, const EvalOptions& opts) {
  log_resolved(cfg, "eval");
  const Layout layout{cfg.out_dir};
  const Lexicons lex = load_lexicons(cfg);
  const Classifiers cls = Classifiers::from_lexicons(lex.attributes, cfg.sentiment_threshold);
  const bool fairness = opts.which != EvalWhich::quality;
  const bool quality = opts.which != EvalWhich::fairness;
  if (fairness) require(layout.fairness(), "build-corpora");
  if (quality) require(layout.test(), "build-corpora");

  for (const auto& model : opts.models) {
    Vocabulary vocab;
    Seq2Seq g = load_dialogue_model(cfg, model, opts.force, &vocab);
    const std::string name = fs::path(model).stem().string();
    if (fairness) {
      const auto pairs = read_fairness(layout.fairness());
      if (pairs.size() < 2) throw std::runtime_error("eval: the fairness corpus needs at least two pairs");
      const FairnessContext ctx{&pairs, &vocab, &cls, &lex.attributes};
      const GateResult r = fairness_gate(g, ctx);
      write_text(layout.reports() / (name + "_fairness.json"), r.report.to_json().dump(2) + "\n");
      write_text(layout.reports() / (name + "_fairness.txt"), r.report.to_text());
      const auto mm = measure_each(r.male_responses, cls, lex.attributes);
      const auto fm = measure_each(r.female_responses, cls, lex.attributes);
      std::string dump;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        nlohmann::json row{{"male_message", join(pairs[i].male_message.tokens)},
                           {"female_message", join(pairs[i].female_message.tokens)},
                           {"male_response", join(r.male_responses[i].tokens)},
                           {"female_response", join(r.female_responses[i].tokens)}};
        for (auto m : kAllMeasurements) {
          row["male_measures"][std::string(to_string(m))] = mm.of(m)[i];
          row["female_measures"][std::string(to_string(m))] = fm.of(m)[i];
        }
        dump += row.dump() + "\n";
      }
      write_text(layout.reports() / (name + "_responses.jsonl"), dump);
      std::cout << "fairness (" << name << ", n=" << pairs.size() << ")\n" << r.report.to_text() << '\n';
    }
    if (quality) {
      const auto test = read_pairs_jsonl(layout.test());
      std::vector<std::vector<int>> messages;
      std::vector<Utterance> refs;
      for (const auto& d : test) {
        messages.push_back(vocab.encode(d.message.tokens));
        refs.push_back(d.response);
      }
      std::vector<Utterance> hyps;
      for (const auto& ids : g.generate(messages)) hyps.push_back(from_tokens(vocab.decode(ids)));
      const QualityReport q = quality_report(hyps, refs);
      write_text(layout.reports() / (name + "_quality.json"), q.to_json().dump(2) + "\n");
      write_text(layout.reports() / (name + "_quality.txt"), q.to_text());
      std::cout << "quality (" << name << ", n=" << test.size() << ")\n" << q.to_text() << '\n';
    }
  }
  return kExitOk;
}

int cmd_chat(const PipelineConfig& cfg, const ChatOptions& opts) {
  log_resolved(cfg, "chat");
  if (opts.models.empty()) throw std::invalid_argument("chat: at least one model is required");
  const Layout layout{cfg.out_dir};
  std::ifstream in(opts.input);
  if (!in) throw std::runtime_error("cannot open chat input " + opts.input.string());
  std::vector<Utterance> messages;
  for (std::string line; std::getline(in, line);) {
    Utterance u = tokenize(line);
    if (!u.empty()) messages.push_back(std::move(u));
  }
  std::optional<Lexicons> lex;
  if (opts.paired) lex = load_lexicons(cfg);

  // rows[i] = (message, variant) where variant is "original" or "swapped".
  std::vector<std::pair<Utterance, std::string>> rows;
  for (const auto& m : messages) {
    rows.emplace_back(m, "original");
    if (opts.paired) rows.emplace_back(swap_gender(m, lex->gender).utterance, "swapped");
  }
  std::vector<std::vector<std::string>> responses(rows.size());
  std::vector<std::string> names;
  for (const auto& model : opts.models) {
    Vocabulary vocab;
    Seq2Seq g = load_dialogue_model(cfg, model, opts.force, &vocab);
    names.push_back(fs::path(model).stem().string());
    std::vector<std::vector<int>> ids;
    for (const auto& [u, _] : rows) ids.push_back(vocab.encode(u.tokens));
    const auto out = g.generate(ids);
    for (std::size_t i = 0; i < rows.size(); ++i) responses[i].push_back(join(vocab.decode(out[i])));
  }
  std::string jsonl;
  std::string table = "Message";
  for (const auto& n : names) table += "\t" + n;
  table += "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    nlohmann::json j{{"message", join(rows[i].first.tokens)}, {"variant", rows[i].second}};
    for (std::size_t k = 0; k < names.size(); ++k) j["responses"][names[k]] = responses[i][k];
    jsonl += j.dump() + "\n";
    table += join(rows[i].first.tokens);
    for (const auto& r : responses[i]) table += "\t" + r;
    table += "\n";
  }
  const fs::path output = opts.output.empty() ? cfg.out_dir / "chat.jsonl" : opts.output;
  write_text(output, jsonl);
  std::cout << table;
  return kExitOk;
}

int cmd_export_features(const PipelineConfig& cfg, const fs::path& output, bool force) {
  log_resolved(cfg, "export-features");
  const Layout layout{cfg.out_dir};
  require(layout.unbiased(), "build-corpora");
  const Lexicons lex = load_lexicons(cfg);
  DetModel det = load_det(cfg, layout, force);
  const Vocabulary vocab = load_vocab(layout);
  const auto examples = make_det_examples(read_labeled(layout.unbiased()), vocab, lex);
  const fs::path path = output.empty() ? layout.reports() / "features.csv" : output;
  export_features(det, examples, path);
  spdlog::info("export-features: {} rows written to {}", examples.size(), path.string());
  return kExitOk;
}

}  // namespace dchat
