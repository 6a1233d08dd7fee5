#include "dchat/disentangle.hpp"

#include "dchat/random.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dchat {

using ad::Matrix;
using ad::Tape;
using ad::Var;

DetConfig DetConfig::paper_scale() {
  DetConfig c;
  c.embed_dim = 300;
  c.hidden_dim = 1000;
  c.gender_dim = 200;
  c.semantic_dim = 800;
  return c;
}

void DetConfig::validate() const {
  if (embed_dim < 1 || hidden_dim < 1 || gender_dim < 1 || semantic_dim < 1) {
    throw std::invalid_argument("det config: dimensions must be >= 1");
  }
  if (n_epoch < 0 || batch_size < 1 || lr <= 0.0 || adversary_steps < 0 || adversary_lr <= 0.0 ||
      adversary_l2 < 0.0 || adversary_buffer < 1) {
    throw std::invalid_argument("det config: invalid training settings");
  }
}

nlohmann::json DetConfig::to_json() const {
  return {{"embed_dim", embed_dim}, {"d", hidden_dim}, {"u", gender_dim}, {"s", semantic_dim},
          {"k1", k1},           {"k2", k2},         {"k3", k3},         {"k4", k4},
          {"n_epoch", n_epoch}, {"batch_size", batch_size}, {"lr", lr}, {"adversary_steps", adversary_steps},
          {"adversary_lr", adversary_lr}, {"adversary_l2", adversary_l2}, {"adversary_buffer", adversary_buffer},
          {"detach_adversarial_terms", detach_adversarial_terms}};
}

DetConfig DetConfig::from_json(const nlohmann::json& j) {
  DetConfig c;
  c.embed_dim = j.at("embed_dim");
  c.hidden_dim = j.at("d");
  c.gender_dim = j.at("u");
  c.semantic_dim = j.at("s");
  c.k1 = j.at("k1");
  c.k2 = j.at("k2");
  c.k3 = j.at("k3");
  c.k4 = j.at("k4");
  c.n_epoch = j.at("n_epoch");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.adversary_steps = j.at("adversary_steps");
  c.adversary_lr = j.at("adversary_lr");
  c.adversary_l2 = j.at("adversary_l2");
  c.adversary_buffer = j.at("adversary_buffer");
  c.detach_adversarial_terms = j.at("detach_adversarial_terms");
  return c;
}

DetExample make_det_example(const LabeledUtterance& u, const Vocabulary& vocab, const Lexicons& lex) {
  return {vocab.encode(u.utterance.tokens), gender_index(u.gender),
          bow_features(u.utterance, lex.attributes, lex.gender, vocab)};
}

std::vector<DetExample> make_det_examples(const std::vector<LabeledUtterance>& corpus, const Vocabulary& vocab,
                                          const Lexicons& lex) {
  std::vector<DetExample> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) {
    if (!u.utterance.empty()) out.push_back(make_det_example(u, vocab, lex));
  }
  return out;
}

namespace {

double clamped_log(double p) { return std::log(std::max(p, kLogEps)); }

double negative_entropy(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) s += x * clamped_log(x);
  return s;
}

std::size_t max_length(const std::vector<std::vector<int>>& batch) {
  std::size_t n = 0;
  for (const auto& s : batch) {
    if (s.empty()) throw std::invalid_argument("cannot encode an empty utterance");
    n = std::max(n, s.size());
  }
  return n;
}

/// Row-wise sum p * log p of a logits matrix, computed stably.
Var row_negative_entropy(const Var& logits) {
  return ad::row_sum(ad::mul(ad::softmax_rows(logits), ad::log_softmax_rows(logits)));
}

Var bow_matrix(Tape& tape, std::span<const DetExample> batch, std::size_t vocab) {
  Matrix b = Matrix::Zero(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(vocab));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (const auto& [id, w] : batch[i].bow.entries) b(static_cast<Eigen::Index>(i), id) = w;
  }
  return tape.constant(std::move(b));
}

std::vector<int> genders_of(std::span<const DetExample> batch) {
  std::vector<int> g;
  g.reserve(batch.size());
  for (const auto& e : batch) g.push_back(e.gender);
  return g;
}

std::vector<std::vector<int>> ids_of(std::span<const DetExample> batch) {
  std::vector<std::vector<int>> ids;
  ids.reserve(batch.size());
  for (const auto& e : batch) ids.push_back(e.ids);
  return ids;
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  return ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(logits), targets)), -1.0);
}

Var soft_cross_entropy(const Var& logits, const Var& target_dist) {
  return ad::scale(ad::mean(ad::row_sum(ad::mul(target_dist, ad::log_softmax_rows(logits)))), -1.0);
}

}  // namespace

double loss_d1(std::span<const double> p_u, int g) {
  if (g < 0 || static_cast<std::size_t>(g) >= p_u.size()) throw std::out_of_range("loss_d1: label out of range");
  return -clamped_log(p_u[static_cast<std::size_t>(g)]);
}

double loss_d2(std::span<const double> p_s) { return negative_entropy(p_s); }

double loss_d3(std::span<const double> bow_pred_u) { return negative_entropy(bow_pred_u); }

double loss_d4(std::span<const double> bow_pred_s, const BowVector& bow) {
  double s = 0.0;
  for (const auto& [id, w] : bow.entries) {
    if (id < 0 || static_cast<std::size_t>(id) >= bow_pred_s.size()) throw std::out_of_range("loss_d4: BoW id");
    s -= w * clamped_log(bow_pred_s[static_cast<std::size_t>(id)]);
  }
  return s;
}

DetModel::DetModel(const DetConfig& cfg, std::size_t vocab_size, std::uint64_t seed)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size < static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    throw std::invalid_argument("det model: vocabulary too small");
  }
  Rng rng = substream(seed, "det.init");
  const int v = static_cast<int>(vocab_size);
  const int latent = cfg.gender_dim + cfg.semantic_dim;
  embed_ = nn::Embedding("det.embed", v, cfg.embed_dim, rng);
  encoder_ = nn::GRUCell("det.encoder", cfg.embed_dim, cfg.hidden_dim, rng);
  proj_u_ = nn::Linear("det.proj_u", cfg.hidden_dim, cfg.gender_dim, rng);
  proj_s_ = nn::Linear("det.proj_s", cfg.hidden_dim, cfg.semantic_dim, rng);
  dec_init_ = nn::Linear("det.dec_init", latent, cfg.hidden_dim, rng);
  decoder_ = nn::GRUCell("det.decoder", cfg.embed_dim + latent, cfg.hidden_dim, rng);
  out_ = nn::Linear("det.out", cfg.hidden_dim, v, rng);
  d1_ = nn::Linear("det.d1", cfg.gender_dim, 2, rng);
  d2_ = nn::Linear("det.d2", cfg.semantic_dim, 2, rng);
  d3_ = nn::Linear("det.d3", cfg.gender_dim, v, rng);
  d4_ = nn::Linear("det.d4", cfg.semantic_dim, v, rng);
}

DetModel::Features DetModel::encode(Tape& tape, const std::vector<std::vector<int>>& batch) {
  const std::size_t len = max_length(batch);
  const auto rows = static_cast<Eigen::Index>(batch.size());
  Var h = tape.constant(Matrix::Zero(rows, cfg_.hidden_dim));
  std::vector<int> step_ids(batch.size());
  for (std::size_t t = 0; t < len; ++t) {
    Matrix mask(rows, 1);
    bool ragged = false;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const bool live = t < batch[i].size();
      step_ids[i] = live ? batch[i][t] : Vocabulary::kPad;
      mask(static_cast<Eigen::Index>(i), 0) = live ? 1.0 : 0.0;
      ragged = ragged || !live;
    }
    Var next = encoder_.step(tape, embed_.lookup(tape, step_ids), h);
    h = ragged ? nn::blend(next, h, tape.constant(std::move(mask))) : next;
  }
  return {h, proj_u_(tape, h), proj_s_(tape, h)};
}

DetModel::Features DetModel::encode_soft(Tape& tape, const std::vector<Var>& steps) {
  if (steps.empty()) throw std::invalid_argument("encode_soft: empty soft sequence");
  const Eigen::Index rows = steps.front().rows();
  Var h = tape.constant(Matrix::Zero(rows, cfg_.hidden_dim));
  Var alive = tape.constant(Matrix::Ones(rows, 1));
  for (const auto& y : steps) {
    alive = ad::mul(alive, ad::one_minus(ad::slice_cols(y, Vocabulary::kEos, 1)));
    Var next = encoder_.step(tape, embed_.expect(tape, y), h);
    h = nn::blend(next, h, alive);
  }
  return {h, proj_u_(tape, h), proj_s_(tape, h)};
}

Var DetModel::reconstruction_loss(Tape& tape, const Features& f, const std::vector<std::vector<int>>& batch) {
  const std::size_t len = max_length(batch);
  const auto rows = static_cast<Eigen::Index>(batch.size());
  Var latent = ad::concat_cols({f.f_u, f.f_s});
  Var h = ad::tanh(dec_init_(tape, latent));
  std::vector<int> prev(batch.size(), Vocabulary::kBos);
  std::vector<int> target(batch.size());
  std::vector<Var> step_losses;
  for (std::size_t t = 0; t <= len; ++t) {
    Var x = ad::concat_cols({embed_.lookup(tape, prev), latent});
    h = decoder_.step(tape, x, h);
    Var logp = ad::log_softmax_rows(out_(tape, h));
    Matrix w(rows, 1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::size_t n = batch[i].size();
      target[i] = t < n ? batch[i][t] : (t == n ? Vocabulary::kEos : -1);
      w(static_cast<Eigen::Index>(i), 0) = target[i] >= 0 ? 1.0 / static_cast<double>(n + 1) : 0.0;
      prev[i] = t < n ? batch[i][t] : Vocabulary::kPad;
    }
    step_losses.push_back(ad::sum(ad::mul(ad::pick(logp, target), tape.constant(std::move(w)))));
  }
  Var total = step_losses.front();
  for (std::size_t i = 1; i < step_losses.size(); ++i) total = ad::add(total, step_losses[i]);
  return ad::scale(total, -1.0 / static_cast<double>(batch.size()));
}

std::vector<int> DetModel::greedy_reconstruct(const std::vector<int>& ids, std::size_t max_len) {
  Tape tape;
  const Features f = encode(tape, {ids});
  Var latent = ad::concat_cols({f.f_u, f.f_s});
  Var h = ad::tanh(dec_init_(tape, latent));
  std::vector<int> out;
  int prev = Vocabulary::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    h = decoder_.step(tape, ad::concat_cols({embed_.lookup(tape, {prev}), latent}), h);
    Eigen::RowVectorXd logits = out_(tape, h).value().row(0);
    logits(Vocabulary::kPad) = -1e300;
    logits(Vocabulary::kBos) = -1e300;
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    if (best == Vocabulary::kEos) break;
    out.push_back(static_cast<int>(best));
    prev = static_cast<int>(best);
  }
  return out;
}

nn::ParamList DetModel::autoencoder_params() {
  nn::ParamList p;
  embed_.collect(p);
  encoder_.collect(p);
  proj_u_.collect(p);
  proj_s_.collect(p);
  dec_init_.collect(p);
  decoder_.collect(p);
  out_.collect(p);
  return p;
}

nn::ParamList DetModel::d1_params() {
  nn::ParamList p;
  d1_.collect(p);
  return p;
}
nn::ParamList DetModel::d2_params() {
  nn::ParamList p;
  d2_.collect(p);
  return p;
}
nn::ParamList DetModel::d3_params() {
  nn::ParamList p;
  d3_.collect(p);
  return p;
}
nn::ParamList DetModel::d4_params() {
  nn::ParamList p;
  d4_.collect(p);
  return p;
}

nn::ParamList DetModel::all_params() {
  nn::ParamList p = autoencoder_params();
  for (auto* list : {&d1_, &d2_, &d3_, &d4_}) list->collect(p);
  return p;
}

Checkpoint DetModel::to_checkpoint(const Vocabulary& vocab) const {
  if (vocab.size() != vocab_size_) throw std::invalid_argument("det checkpoint: vocabulary size mismatch");
  Checkpoint c;
  c.kind = "disentangle";
  c.config = cfg_.to_json();
  c.vocab = vocab.tokens();
  c.store(const_cast<DetModel*>(this)->all_params());
  return c;
}

DetModel DetModel::from_checkpoint(const Checkpoint& ckpt, const DetConfig* expected) {
  if (ckpt.kind != "disentangle") throw std::runtime_error("checkpoint is not a disentanglement model: " + ckpt.kind);
  const DetConfig cfg = DetConfig::from_json(ckpt.config);
  if (expected != nullptr && !(cfg == *expected)) {
    throw std::runtime_error("disentanglement checkpoint config differs from the requested config");
  }
  DetModel m(cfg, ckpt.vocab.size(), 0);
  ckpt.restore(m.all_params());
  return m;
}

DisentangledFeatures encode_split(DetModel& m, const std::vector<int>& ids) {
  Tape tape;
  const auto f = m.encode(tape, {ids});
  return {f.f_u.value().row(0).transpose(), f.f_s.value().row(0).transpose()};
}

double reconstruct_loss(DetModel& m, const std::vector<int>& ids) {
  Tape tape;
  const auto f = m.encode(tape, {ids});
  return m.reconstruction_loss(tape, f, {ids}).scalar();
}

DetLossTerms combined_loss(Tape& tape, DetModel& m, std::span<const DetExample> batch) {
  if (batch.empty()) throw std::invalid_argument("combined_loss: empty batch");
  const auto& cfg = m.config();
  const auto ids = ids_of(batch);
  const auto f = m.encode(tape, ids);
  DetLossTerms t;
  t.rec = m.reconstruction_loss(tape, f, ids);
  t.d1 = cross_entropy(m.d1_logits(tape, f.f_u), genders_of(batch));
  Var adv_u = f.f_u;
  Var adv_s = f.f_s;
  if (cfg.detach_adversarial_terms) {
    const Var h = tape.constant(f.h.value());
    adv_u = m.project_u(tape, h);
    adv_s = m.project_s(tape, h);
  }
  t.d2 = ad::mean(row_negative_entropy(m.d2_logits(tape, adv_s)));
  t.d3 = ad::mean(row_negative_entropy(m.d3_logits(tape, adv_u)));
  t.d4 = soft_cross_entropy(m.d4_logits(tape, f.f_s), bow_matrix(tape, batch, m.vocab_size()));
  t.total = ad::add(ad::add(ad::add(ad::add(t.rec, ad::scale(t.d1, cfg.k1)), ad::scale(t.d2, cfg.k2)),
                            ad::scale(t.d3, cfg.k3)),
                    ad::scale(t.d4, cfg.k4));
  return t;
}

Var adversary_loss(Tape& tape, DetModel& m, std::span<const DetExample> batch) {
  const auto f = m.encode(tape, ids_of(batch));
  Var ce_gender = cross_entropy(m.d2_logits(tape, f.f_s), genders_of(batch));
  Var ce_bow = soft_cross_entropy(m.d3_logits(tape, f.f_u), bow_matrix(tape, batch, m.vocab_size()));
  return ad::add(ce_gender, ce_bow);
}

DetTrainer::DetTrainer(DetModel& m)
    : model(m), adversary_opt(m.config().adversary_lr), joint_opt(m.config().lr) {}

double DetTrainer::adversary_step(std::span<const DetExample> batch) {
  {
    Tape tape;
    const auto f = model.encode(tape, ids_of(batch));
    replay.push_back({f.f_s.value(), f.f_u.value(), bow_matrix(tape, batch, model.vocab_size()).value(),
                      genders_of(batch)});
    while (replay.size() > static_cast<std::size_t>(model.config().adversary_buffer)) replay.pop_front();
  }
  auto all = model.all_params();
  nn::set_requires_grad(all, false);
  auto adv = model.d2_params();
  for (auto* p : model.d3_params()) adv.push_back(p);
  nn::set_requires_grad(adv, true);
  double first = 0.0;
  const double l2 = model.config().adversary_l2;
  const double w = 1.0 / static_cast<double>(replay.size());
  for (int s = 0; s < model.config().adversary_steps; ++s) {
    nn::zero_grad(adv);
    Tape tape;
    Var loss = tape.constant(Matrix::Zero(1, 1));
    for (const auto& r : replay) {
      Var ce_gender = cross_entropy(model.d2_logits(tape, tape.constant(r.f_s)), r.genders);
      Var ce_bow = soft_cross_entropy(model.d3_logits(tape, tape.constant(r.f_u)), tape.constant(r.bow));
      loss = ad::add(loss, ad::scale(ad::add(ce_gender, ce_bow), w));
    }
    if (s == 0) first = loss.scalar();
    if (l2 > 0.0) {
      for (auto* wm : {adv[0], adv[2]}) {  // d2 and d3 weight matrices
        Var wv = tape.param(*wm);
        loss = ad::add(loss, ad::scale(ad::sum(ad::mul(wv, wv)), l2));
      }
    }
    tape.backward(loss);
    adversary_opt.step(adv);
  }
  nn::set_requires_grad(all, true);
  return first;
}

DetLossTerms DetTrainer::joint_step(Tape& tape, std::span<const DetExample> batch) {
  auto all = model.all_params();
  nn::ParamList joint = model.autoencoder_params();
  for (auto* p : model.d1_params()) joint.push_back(p);
  for (auto* p : model.d4_params()) joint.push_back(p);
  nn::set_requires_grad(all, false);
  nn::set_requires_grad(joint, true);
  nn::zero_grad(joint);
  auto terms = combined_loss(tape, model, batch);
  tape.backward(terms.total);
  joint_opt.step(joint);
  nn::set_requires_grad(all, true);
  return terms;
}

std::vector<DetEpochStats> det_train(DetModel& m, const std::vector<DetExample>& corpus,
                                     const DetTrainOptions& opts) {
  if (corpus.empty()) throw std::invalid_argument("det_train: empty corpus");
  bool has[2] = {false, false};
  for (const auto& e : corpus) has[e.gender] = true;
  if (!has[0] || !has[1]) throw std::invalid_argument("det_train: corpus must contain both genders");

  DetTrainer trainer(m);
  const auto bs = static_cast<std::size_t>(m.config().batch_size);
  std::vector<DetEpochStats> history;
  for (int epoch = 0; epoch < m.config().n_epoch; ++epoch) {
    const auto perm = seeded_permutation(corpus.size(), opts.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    DetEpochStats st;
    st.epoch = epoch;
    std::size_t batches = 0;
    std::vector<DetExample> batch;
    for (std::size_t start = 0; start < perm.size(); start += bs) {
      batch.clear();
      for (std::size_t k = start; k < std::min(start + bs, perm.size()); ++k) batch.push_back(corpus[perm[k]]);
      st.adversary += trainer.adversary_step(batch);
      Tape tape;
      const auto terms = trainer.joint_step(tape, batch);
      st.total += terms.total.scalar();
      st.rec += terms.rec.scalar();
      st.d1 += terms.d1.scalar();
      st.d2 += terms.d2.scalar();
      st.d3 += terms.d3.scalar();
      st.d4 += terms.d4.scalar();
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    for (double* v : {&st.total, &st.rec, &st.d1, &st.d2, &st.d3, &st.d4, &st.adversary}) *v /= nb;
    if (opts.probe_each_epoch) {
      try {
        const auto pr = probe_features(m, corpus, opts.seed);
        st.probe_u = pr.gender_features;
        st.probe_s = pr.semantic_features;
      } catch (const std::invalid_argument& e) {
        spdlog::warn("probe skipped: {}", e.what());
      }
    }
    spdlog::debug("det epoch {}: total={:.4f} rec={:.4f} d1={:.4f} d2={:.4f} d3={:.4f} d4={:.4f} probe_u={:.3f} "
                  "probe_s={:.3f}",
                  epoch, st.total, st.rec, st.d1, st.d2, st.d3, st.d4, st.probe_u, st.probe_s);
    if (opts.on_epoch) opts.on_epoch(st);
    history.push_back(st);
  }
  return history;
}

Matrix feature_matrix(DetModel& m, const std::vector<std::vector<int>>& utterances) {
  const int u = m.config().gender_dim;
  const int s = m.config().semantic_dim;
  Matrix out(static_cast<Eigen::Index>(utterances.size()), u + s);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < utterances.size(); start += kChunk) {
    const std::size_t end = std::min(start + kChunk, utterances.size());
    std::vector<std::vector<int>> chunk(utterances.begin() + static_cast<std::ptrdiff_t>(start),
                                        utterances.begin() + static_cast<std::ptrdiff_t>(end));
    Tape tape;
    const auto f = m.encode(tape, chunk);
    const auto r0 = static_cast<Eigen::Index>(start);
    const auto n = static_cast<Eigen::Index>(end - start);
    out.block(r0, 0, n, u) = f.f_u.value();
    out.block(r0, u, n, s) = f.f_s.value();
  }
  return out;
}

double probe_accuracy(const Matrix& features, const std::vector<int>& labels, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw std::invalid_argument("probe_accuracy: label count mismatch");
  if (n < 5) throw std::invalid_argument("probe_accuracy: too few samples");
  const auto perm = seeded_permutation(n, seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t n_train = static_cast<std::size_t>(0.8 * static_cast<double>(n) + 0.5);
  const auto p = features.cols();

  auto gather = [&](std::size_t from, std::size_t to, Matrix& x, Eigen::VectorXd& y) {
    x.resize(static_cast<Eigen::Index>(to - from), p);
    y.resize(static_cast<Eigen::Index>(to - from));
    for (std::size_t k = from; k < to; ++k) {
      x.row(static_cast<Eigen::Index>(k - from)) = features.row(static_cast<Eigen::Index>(perm[k]));
      y(static_cast<Eigen::Index>(k - from)) = labels[perm[k]];
    }
  };
  Matrix xtr;
  Matrix xte;
  Eigen::VectorXd ytr;
  Eigen::VectorXd yte;
  gather(0, n_train, xtr, ytr);
  gather(n_train, n, xte, yte);
  for (const auto* y : {&ytr, &yte}) {
    const double pos = y->sum();
    if (pos == 0.0 || pos == static_cast<double>(y->size())) {
      throw std::invalid_argument("probe_accuracy: a split contains a single class");
    }
  }

  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) sd(j) = sd(j) > 1e-12 ? sd(j) : 1.0;
  const Matrix ztr = (xtr.rowwise() - mu).array().rowwise() / sd.array();
  const Matrix zte = (xte.rowwise() - mu).array().rowwise() / sd.array();

  // Logistic regression, full-batch Adam with a light L2 penalty.
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
  double b = 0.0;
  Eigen::VectorXd mw = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd vw = Eigen::VectorXd::Zero(p);
  double mb = 0.0;
  double vb = 0.0;
  constexpr double kLr = 0.05;
  constexpr double kL2 = 1e-4;
  const double inv_n = 1.0 / static_cast<double>(ztr.rows());
  for (int it = 1; it <= 600; ++it) {
    const Eigen::VectorXd z = (ztr * w).array() + b;
    const Eigen::VectorXd prob = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    const Eigen::VectorXd err = prob - ytr;
    const Eigen::VectorXd gw = ztr.transpose() * err * inv_n + kL2 * w;
    const double gb = err.sum() * inv_n;
    mw = 0.9 * mw + 0.1 * gw;
    vw = 0.999 * vw + 0.001 * gw.cwiseProduct(gw);
    mb = 0.9 * mb + 0.1 * gb;
    vb = 0.999 * vb + 0.001 * gb * gb;
    const double c1 = 1.0 - std::pow(0.9, it);
    const double c2 = 1.0 - std::pow(0.999, it);
    w.array() -= kLr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + 1e-8);
    b -= kLr * (mb / c1) / (std::sqrt(vb / c2) + 1e-8);
  }
  const Eigen::VectorXd zt = (zte * w).array() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < zt.size(); ++i) correct += ((zt(i) > 0.0 ? 1.0 : 0.0) == yte(i)) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(zt.size());
}

ProbeResult probe_features(DetModel& m, const std::vector<DetExample>& corpus, std::uint64_t seed) {
  std::vector<std::vector<int>> ids;
  std::vector<int> labels;
  for (const auto& e : corpus) {
    ids.push_back(e.ids);
    labels.push_back(e.gender);
  }
  const Matrix f = feature_matrix(m, ids);
  const int u = m.config().gender_dim;
  const int s = m.config().semantic_dim;
  return {probe_accuracy(f.leftCols(u), labels, seed), probe_accuracy(f.rightCols(s), labels, seed)};
}

void export_features(DetModel& m, const std::vector<DetExample>& examples, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write feature export " + path.string());
  const int u = m.config().gender_dim;
  const int s = m.config().semantic_dim;
  os << "gender";
  for (int i = 0; i < u; ++i) os << ",fu_" << i;
  for (int i = 0; i < s; ++i) os << ",fs_" << i;
  os << '\n';
  std::vector<std::vector<int>> ids;
  for (const auto& e : examples) ids.push_back(e.ids);
  const Matrix f = feature_matrix(m, ids);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    os << to_string(gender_from_index(examples[static_cast<std::size_t>(r)].gender));
    for (Eigen::Index c = 0; c < f.cols(); ++c) os << ',' << fmt::format("{}", f(r, c));
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace dchat
