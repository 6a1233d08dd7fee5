#pragma once

// Seq2Seq dialogue model with MLE pretraining, greedy and Gumbel-Softmax
// decoding, adversarial debiasing against a frozen disentanglement model,
// and the CDA / WER baselines.

#include "dchat/checkpoint.hpp"
#include "dchat/corpora.hpp"
#include "dchat/disentangle.hpp"
#include "dchat/eval.hpp"
#include "dchat/nn.hpp"
#include "dchat/optim.hpp"
#include "dchat/textcore.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace dchat {

struct Seq2SeqConfig {
  int embed_dim = 32;
  int hidden_dim = 64;
  int num_layers = 1;
  int max_decode_len = 12;
  int batch_size = 32;
  double sgd_lr = 1.0;
  double clip_norm = 5.0;

  /// Three-layer LSTM, hidden 1024, embedding 300.
  static Seq2SeqConfig paper_scale();
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static Seq2SeqConfig from_json(const nlohmann::json& j);
  friend bool operator==(const Seq2SeqConfig&, const Seq2SeqConfig&) = default;
};

/// tau = tau0 / divisor^floor(t / interval) until the first value below
/// `floor`, which is then held.
struct GumbelSchedule {
  double tau0 = 1.0;
  double divisor = 1.1;
  long interval = 200;
  double floor = 0.3;

  [[nodiscard]] double tau(long iteration) const;
};

struct AdvConfig {
  double kp1 = 1.0;
  double kp2 = 1.0;
  int d_steps = 2;
  int g_steps = 2;
  int g_teach_steps = 1;
  int batch_size = 32;
  int max_loops = 200;
  int gate_every = 10;
  double lr = 1e-3;
  int disc_hidden = 64;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Encoded dialogue: message ids, response ids (no specials) and gender index
/// (-1 for neutral).
struct DialogueExample {
  std::vector<int> message;
  std::vector<int> response;
  int gender = -1;
};

std::vector<DialogueExample> encode_dialogues(const std::vector<DialoguePair>& pairs, const Vocabulary& vocab);
std::vector<DialogueExample> encode_dialogues(const std::vector<GenderedDialogue>& pairs, const Vocabulary& vocab);

/// Standard Gumbel(0, 1) draws.
ad::Matrix gumbel_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng);
/// softmax((logits + noise) / tau) row-wise, differentiable in logits.
ad::Var gumbel_softmax(const ad::Var& logits, double tau, const ad::Matrix& noise);
/// One relaxed sample for a single logit vector.
Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, double tau, Rng& rng);

class Seq2Seq {
 public:
  struct State {
    std::vector<nn::LSTMState> layers;
  };

  Seq2Seq() = default;
  Seq2Seq(const Seq2SeqConfig& cfg, std::size_t vocab_size, std::uint64_t seed);

  [[nodiscard]] const Seq2SeqConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t vocab_size() const { return vocab_size_; }

  State encode(ad::Tape& tape, const std::vector<std::vector<int>>& messages);
  /// One decoder step; returns logits with PAD and BOS masked out.
  ad::Var step(ad::Tape& tape, State& state, const ad::Var& input);

  /// Teacher-forced token cross-entropy averaged over all target tokens
  /// (response then EOS) in the batch. 1x1.
  ad::Var mle_loss(ad::Tape& tape, std::span<const DialogueExample> batch);
  /// Greedy argmax decoding until EOS or max_decode_len, batched.
  std::vector<std::vector<int>> generate(const std::vector<std::vector<int>>& messages);
  /// max_decode_len relaxed samples; each step's input is the expected
  /// embedding under the previous sample.
  std::vector<ad::Var> soft_decode(ad::Tape& tape, const std::vector<std::vector<int>>& messages, double tau,
                                   Rng& noise);

  nn::Embedding& embedding() { return embed_; }
  nn::ParamList params();

  [[nodiscard]] Checkpoint to_checkpoint(const Vocabulary& vocab, const std::string& stage) const;
  static Seq2Seq from_checkpoint(const Checkpoint& ckpt, const Seq2SeqConfig* expected = nullptr);

 private:
  Seq2SeqConfig cfg_;
  std::size_t vocab_size_ = 0;
  nn::Embedding embed_;
  std::vector<nn::LSTMCell> encoder_;
  std::vector<nn::LSTMCell> decoder_;
  nn::Linear out_;
  ad::Matrix logit_mask_;
};

std::vector<int> generate(Seq2Seq& g, const std::vector<int>& message);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double perplexity = 0.0;
  double regularizer = 0.0;
};

struct MleOptions {
  int epochs = 10;
  std::uint64_t seed = 0;
  std::function<void(const EpochLog&)> on_epoch;
};

/// SGD (lr and clipping from the model config) on the teacher-forced loss.
std::vector<EpochLog> pretrain_mle(Seq2Seq& g, const std::vector<DialogueExample>& corpus, const MleOptions& opts);

/// Three-layer ReLU feedforward gender classifier.
struct AdvDiscriminator {
  nn::MLP net;

  AdvDiscriminator() = default;
  AdvDiscriminator(const std::string& name, int in_dim, int hidden, Rng& rng);
  ad::Var logits(ad::Tape& tape, const ad::Var& x) { return net(tape, x); }
  nn::ParamList params();
};

/// D1 over f_u and D2 over f_s, initialized from the "adv.disc" substream.
std::pair<AdvDiscriminator, AdvDiscriminator> init_discriminators(const DetConfig& det, const AdvConfig& cfg,
                                                                  std::uint64_t seed);

struct AdvLosses {
  ad::Var d1;  // cross-entropy of D1(f_u) against the dialogue gender
  ad::Var d2;  // negative entropy of D2(f_s)
};

AdvLosses adv_losses(ad::Tape& tape, DetModel& det, AdvDiscriminator& d1, AdvDiscriminator& d2,
                     const std::vector<ad::Var>& soft_steps, const std::vector<int>& genders);

struct CompoundLoss {
  ad::Var total;
  ad::Var mle;
  ad::Var d1;
  ad::Var d2;
};

/// L = L_MLE + kp1 L_D1 + kp2 L_D2 on one gendered batch.
CompoundLoss compound_loss(ad::Tape& tape, Seq2Seq& g, DetModel& det, AdvDiscriminator& d1, AdvDiscriminator& d2,
                           std::span<const DialogueExample> batch, double kp1, double kp2, double tau, Rng& noise);

/// Cross-entropy of D2(f_s) of relaxed samples against the dialogue gender.
ad::Var d2_training_loss(ad::Tape& tape, Seq2Seq& g, DetModel& det, AdvDiscriminator& d2,
                         std::span<const DialogueExample> batch, double tau, Rng& noise);

struct FairnessContext {
  const std::vector<FairnessPair>* pairs = nullptr;
  const Vocabulary* vocab = nullptr;
  const Classifiers* classifiers = nullptr;
  const AttributeLexicons* lexicons = nullptr;
};

struct GateResult {
  bool pass = false;
  FairnessReport report;
  std::vector<Utterance> male_responses;
  std::vector<Utterance> female_responses;
};

/// Greedy responses to both sides of every pair; pass iff every p >= 0.05.
GateResult fairness_gate(Seq2Seq& g, const FairnessContext& ctx);

struct AdvResult {
  Seq2Seq model;
  bool passed = false;
  int loops = 0;
  GateResult gate;
  AdvDiscriminator d1;
  AdvDiscriminator d2;
};

struct AdvOptions {
  std::uint64_t seed = 0;
  GumbelSchedule schedule;
  std::function<void(const nlohmann::json&)> on_log;
};

/// Alternates D2 updates, joint G + D1 updates on the compound loss and
/// teacher-forced MLE on neutral dialogues until the fairness gate passes or
/// max_loops is reached; the disentanglement model stays frozen.
AdvResult adversarial_train(const Seq2Seq& pretrained, DetModel& det, const std::vector<DialogueExample>& gendered,
                            const std::vector<DialogueExample>& neutral, const FairnessContext& fairness,
                            const AdvConfig& cfg, const AdvOptions& opts);

/// Fraction of greedy responses to both pair sides whose D1(f_u) prediction
/// matches the side's gender.
double d1_response_accuracy(Seq2Seq& g, DetModel& det, AdvDiscriminator& d1, const FairnessContext& ctx);

/// Original pairs plus a swapped copy of every pair containing a gender word.
std::vector<DialoguePair> cda_augment(const std::vector<DialoguePair>& dialogues, const GenderLexicon& glex);

/// Counterpart pairs with both words in the vocabulary, as id pairs.
std::vector<std::pair<int, int>> resolvable_pairs(const GenderLexicon& glex, const Vocabulary& vocab);
/// Mean squared Euclidean distance between counterpart embeddings.
double counterpart_distance(Seq2Seq& g, const std::vector<std::pair<int, int>>& pairs);

struct WerOptions {
  MleOptions mle;
  double k = 0.25;
};

/// Pretraining with k * counterpart_distance added to the loss. Throws when
/// no pair is resolvable.
std::vector<EpochLog> train_wer(Seq2Seq& g, const std::vector<DialogueExample>& corpus,
                                const std::vector<std::pair<int, int>>& pairs, const WerOptions& opts);

/// L_MLE + k * counterpart distance on one batch.
ad::Var wer_loss(ad::Tape& tape, Seq2Seq& g, std::span<const DialogueExample> batch,
                 const std::vector<std::pair<int, int>>& pairs, double k);

}  // namespace dchat
