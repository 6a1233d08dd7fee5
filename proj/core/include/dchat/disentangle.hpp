#pragma once

// Disentanglement autoencoder. A GRU encoder produces h; two affine maps
// split it into unbiased-gender features f_u and semantic features f_s; a
// GRU decoder reconstructs the utterance from [f_u : f_s]. Four single-layer
// discriminators read the split features:
//   d1: gender from f_u (cooperative)      d2: gender from f_s (adversarial)
//   d3: bag-of-words from f_u (adversarial) d4: bag-of-words from f_s (cooperative)

#include "dchat/checkpoint.hpp"
#include "dchat/corpora.hpp"
#include "dchat/nn.hpp"
#include "dchat/optim.hpp"
#include "dchat/textcore.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace dchat {

inline constexpr double kLogEps = 1e-12;

struct DetConfig {
  int embed_dim = 32;
  int hidden_dim = 64;    // d
  int gender_dim = 16;    // u
  int semantic_dim = 48;  // s
  double k1 = 10.0;
  double k2 = 1.0;
  double k3 = 1.0;
  double k4 = 3.0;
  int n_epoch = 20;
  int batch_size = 32;
  double lr = 1e-3;
  int adversary_steps = 20;  // d2/d3 updates per batch before the joint update
  double adversary_lr = 5e-2;
  /// L2 penalty on the d2/d3 weight matrices in the adversary objective; keeps
  /// the adversaries from saturating, where the entropy losses lose gradient.
  double adversary_l2 = 0.1;
  /// The adversaries train on the detached features of the last this-many
  /// batches, so they track a moving encoder instead of chasing each batch.
  int adversary_buffer = 8;
  /// When set, L_d2 and L_d3 are computed from a detached copy of the encoder
  /// state and reach only the projections; the encoder itself is shaped by
  /// reconstruction, d1 and d4.
  bool detach_adversarial_terms = true;

  /// d=1000, u=200, s=800, embedding 300.
  static DetConfig paper_scale();
  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static DetConfig from_json(const nlohmann::json& j);
  friend bool operator==(const DetConfig&, const DetConfig&) = default;
};

struct DisentangledFeatures {
  Eigen::VectorXd f_u;
  Eigen::VectorXd f_s;
};

/// Encoded training example: token ids (no specials), gender index, BoW target.
struct DetExample {
  std::vector<int> ids;
  int gender = 0;
  BowVector bow;
};

DetExample make_det_example(const LabeledUtterance& u, const Vocabulary& vocab, const Lexicons& lex);
std::vector<DetExample> make_det_examples(const std::vector<LabeledUtterance>& corpus, const Vocabulary& vocab,
                                          const Lexicons& lex);

// ---- scalar losses on explicit distributions ------------------------------

/// -log p[g].
double loss_d1(std::span<const double> p_u, int g);
/// Negative entropy sum_i p_i ln p_i; minimized at the uniform distribution.
double loss_d2(std::span<const double> p_s);
/// Negative entropy over the vocabulary.
double loss_d3(std::span<const double> bow_pred_u);
/// -sum_i B_i ln p_i; 0 for an empty BoW.
double loss_d4(std::span<const double> bow_pred_s, const BowVector& bow);

class DetModel {
 public:
  struct Features {
    ad::Var h;
    ad::Var f_u;
    ad::Var f_s;
  };

  DetModel() = default;
  DetModel(const DetConfig& cfg, std::size_t vocab_size, std::uint64_t seed);

  [[nodiscard]] const DetConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t vocab_size() const { return vocab_size_; }

  /// Encode right-padded token id sequences (each non-empty).
  Features encode(ad::Tape& tape, const std::vector<std::vector<int>>& batch);
  /// Encode per-step distributions over the vocabulary via expected
  /// embeddings. A step contributes in proportion to the probability that no
  /// EOS has been emitted up to and including it.
  Features encode_soft(ad::Tape& tape, const std::vector<ad::Var>& steps);

  /// Per-utterance mean teacher-forced token cross-entropy (targets = tokens
  /// then EOS), averaged over the batch. 1x1.
  ad::Var reconstruction_loss(ad::Tape& tape, const Features& f, const std::vector<std::vector<int>>& batch);
  /// Greedy decode from the features of one utterance.
  std::vector<int> greedy_reconstruct(const std::vector<int>& ids, std::size_t max_len);

  /// Projections of an encoder state.
  ad::Var project_u(ad::Tape& tape, const ad::Var& h) { return proj_u_(tape, h); }
  ad::Var project_s(ad::Tape& tape, const ad::Var& h) { return proj_s_(tape, h); }
  ad::Var d1_logits(ad::Tape& tape, const ad::Var& f_u) { return d1_(tape, f_u); }
  /// f_s is standardized over the batch first, so gender information cannot
  /// hide in low-variance directions.
  ad::Var d2_logits(ad::Tape& tape, const ad::Var& f_s) { return d2_(tape, ad::standardize_cols(f_s)); }
  ad::Var d3_logits(ad::Tape& tape, const ad::Var& f_u) { return d3_(tape, f_u); }
  ad::Var d4_logits(ad::Tape& tape, const ad::Var& f_s) { return d4_(tape, f_s); }

  /// Encoder, projections, decoder.
  nn::ParamList autoencoder_params();
  nn::ParamList d1_params();
  nn::ParamList d2_params();
  nn::ParamList d3_params();
  nn::ParamList d4_params();
  nn::ParamList all_params();

  [[nodiscard]] Checkpoint to_checkpoint(const Vocabulary& vocab) const;
  /// Throws when `expected` is given and differs from the stored config.
  static DetModel from_checkpoint(const Checkpoint& ckpt, const DetConfig* expected = nullptr);

 private:
  DetConfig cfg_;
  std::size_t vocab_size_ = 0;
  nn::Embedding embed_;
  nn::GRUCell encoder_;
  nn::Linear proj_u_;
  nn::Linear proj_s_;
  nn::Linear dec_init_;
  nn::GRUCell decoder_;
  nn::Linear out_;
  nn::Linear d1_;
  nn::Linear d2_;
  nn::Linear d3_;
  nn::Linear d4_;
};

DisentangledFeatures encode_split(DetModel& m, const std::vector<int>& ids);
double reconstruct_loss(DetModel& m, const std::vector<int>& ids);

struct DetLossTerms {
  ad::Var total;
  ad::Var rec;
  ad::Var d1;
  ad::Var d2;
  ad::Var d3;
  ad::Var d4;
};

/// L_det = L_rec + k1 L_d1 + k2 L_d2 + k3 L_d3 + k4 L_d4, batch-mean.
DetLossTerms combined_loss(ad::Tape& tape, DetModel& m, std::span<const DetExample> batch);

/// Adversary objective: d2 cross-entropy on gold gender from f_s plus d3
/// cross-entropy against the BoW target from f_u, batch-mean.
ad::Var adversary_loss(ad::Tape& tape, DetModel& m, std::span<const DetExample> batch);

/// One alternating update: adversary_steps Adam steps of d2/d3 on the replay
/// buffer with all else frozen, then one Adam step of the autoencoder + d1 +
/// d4 on L_det.
struct DetTrainer {
  /// Detached adversary inputs of one batch.
  struct Replay {
    ad::Matrix f_s;
    ad::Matrix f_u;
    ad::Matrix bow;
    std::vector<int> genders;
  };

  explicit DetTrainer(DetModel& model);
  /// Adds the batch to the replay buffer and trains the adversaries on it.
  /// Returns the adversary loss before the first update.
  double adversary_step(std::span<const DetExample> batch);
  DetLossTerms joint_step(ad::Tape& tape, std::span<const DetExample> batch);

  DetModel& model;
  optim::Adam adversary_opt;
  optim::Adam joint_opt;
  std::deque<Replay> replay;
};

struct DetEpochStats {
  int epoch = 0;
  double total = 0.0;
  double rec = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  double d3 = 0.0;
  double d4 = 0.0;
  double adversary = 0.0;
  double probe_u = -1.0;  // -1 when not measured
  double probe_s = -1.0;
};

struct DetTrainOptions {
  std::uint64_t seed = 0;
  bool probe_each_epoch = false;
  std::function<void(const DetEpochStats&)> on_epoch;
};

/// Throws std::invalid_argument when the corpus is empty or single-gender.
std::vector<DetEpochStats> det_train(DetModel& m, const std::vector<DetExample>& corpus,
                                     const DetTrainOptions& opts = {});

/// Inference-mode features as rows: [f_u | f_s].
ad::Matrix feature_matrix(DetModel& m, const std::vector<std::vector<int>>& utterances);

/// Held-out accuracy of a freshly trained logistic-regression probe
/// (80/20 split under `seed`). Throws when a split lacks one of the classes.
double probe_accuracy(const ad::Matrix& features, const std::vector<int>& labels, std::uint64_t seed = 7);

struct ProbeResult {
  double gender_features = 0.0;
  double semantic_features = 0.0;
};
ProbeResult probe_features(DetModel& m, const std::vector<DetExample>& corpus, std::uint64_t seed = 7);

/// CSV: header "gender,fu_0..,fs_0..", one row per utterance.
void export_features(DetModel& m, const std::vector<DetExample>& examples, const std::filesystem::path& path);

}  // namespace dchat
