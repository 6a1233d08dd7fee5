#include "dchat/dialogue.hpp"

#include "dchat/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dchat {

using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kMaskedLogit = -1e9;

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  return ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(logits), targets)), -1.0);
}

Var mean_negative_entropy(const Var& logits) {
  return ad::mean(ad::row_sum(ad::mul(ad::softmax_rows(logits), ad::log_softmax_rows(logits))));
}

std::vector<std::vector<int>> messages_of(std::span<const DialogueExample> batch) {
  std::vector<std::vector<int>> m;
  m.reserve(batch.size());
  for (const auto& e : batch) m.push_back(e.message);
  return m;
}

std::vector<int> genders_of(std::span<const DialogueExample> batch) {
  std::vector<int> g;
  g.reserve(batch.size());
  for (const auto& e : batch) {
    if (e.gender != 0 && e.gender != 1) throw std::invalid_argument("gendered batch contains an unlabeled dialogue");
    g.push_back(e.gender);
  }
  return g;
}

std::size_t max_length(const std::vector<std::vector<int>>& seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("cannot encode an empty message");
    n = std::max(n, s.size());
  }
  return n;
}

nn::ParamList concat(nn::ParamList a, const nn::ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<DialogueExample> sample_batch(const std::vector<DialogueExample>& corpus, std::size_t n, Rng& rng) {
  std::vector<DialogueExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(corpus.size()));
    out.push_back(corpus[std::min(k, corpus.size() - 1)]);
  }
  return out;
}

std::size_t target_tokens(std::span<const DialogueExample> batch) {
  std::size_t n = 0;
  for (const auto& e : batch) n += e.response.size() + 1;
  return n;
}

struct BatchLossTerms {
  Var total;
  Var mle;
};
using BatchLoss = std::function<BatchLossTerms(Tape&, std::span<const DialogueExample>)>;

std::vector<EpochLog> sgd_epochs(Seq2Seq& g, const std::vector<DialogueExample>& corpus, const MleOptions& opts,
                                 const BatchLoss& loss_fn, const std::function<double()>& regularizer) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  optim::Sgd sgd(g.config().sgd_lr, g.config().clip_norm);
  auto params = g.params();
  const auto bs = static_cast<std::size_t>(g.config().batch_size);
  std::vector<EpochLog> history;
  std::vector<DialogueExample> batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto perm = seeded_permutation(corpus.size(), opts.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    double nll = 0.0;
    double tokens = 0.0;
    for (std::size_t start = 0; start < perm.size(); start += bs) {
      batch.clear();
      for (std::size_t k = start; k < std::min(start + bs, perm.size()); ++k) batch.push_back(corpus[perm[k]]);
      nn::zero_grad(params);
      Tape tape;
      const auto terms = loss_fn(tape, batch);
      const auto n = static_cast<double>(target_tokens(batch));
      nll += terms.mle.scalar() * n;
      tokens += n;
      tape.backward(terms.total);
      sgd.step(params);
    }
    EpochLog log;
    log.epoch = epoch;
    log.loss = nll / tokens;
    log.perplexity = std::exp(log.loss);
    log.regularizer = regularizer ? regularizer() : 0.0;
    spdlog::debug("epoch {}: loss={:.4f} ppl={:.3f} reg={:.5f}", epoch, log.loss, log.perplexity, log.regularizer);
    if (opts.on_epoch) opts.on_epoch(log);
    history.push_back(log);
  }
  return history;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

Seq2SeqConfig Seq2SeqConfig::paper_scale() {
  Seq2SeqConfig c;
  c.embed_dim = 300;
  c.hidden_dim = 1024;
  c.num_layers = 3;
  return c;
}

void Seq2SeqConfig::validate() const {
  if (embed_dim < 1 || hidden_dim < 1 || num_layers < 1 || max_decode_len < 1) {
    throw std::invalid_argument("seq2seq config: dimensions must be >= 1");
  }
  if (batch_size < 1 || sgd_lr <= 0.0 || clip_norm < 0.0) {
    throw std::invalid_argument("seq2seq config: invalid training settings");
  }
}

nlohmann::json Seq2SeqConfig::to_json() const {
  return {{"embed_dim", embed_dim},   {"hidden_dim", hidden_dim}, {"num_layers", num_layers},
          {"max_decode_len", max_decode_len}, {"batch_size", batch_size}, {"sgd_lr", sgd_lr},
          {"clip_norm", clip_norm}};
}

Seq2SeqConfig Seq2SeqConfig::from_json(const nlohmann::json& j) {
  Seq2SeqConfig c;
  c.embed_dim = j.at("embed_dim");
  c.hidden_dim = j.at("hidden_dim");
  c.num_layers = j.at("num_layers");
  c.max_decode_len = j.at("max_decode_len");
  c.batch_size = j.at("batch_size");
  c.sgd_lr = j.at("sgd_lr");
  c.clip_norm = j.at("clip_norm");
  return c;
}

double GumbelSchedule::tau(long iteration) const {
  if (tau0 <= 0.0 || divisor < 1.0 || interval < 1) throw std::invalid_argument("invalid Gumbel schedule");
  long k = std::max(0L, iteration) / interval;
  double t = tau0;
  for (long i = 0; i < k && t >= floor; ++i) t /= divisor;
  return t;
}

void AdvConfig::validate() const {
  if (d_steps < 0 || g_steps < 0 || g_teach_steps < 0) throw std::invalid_argument("adv config: negative step count");
  if (max_loops < 1) throw std::invalid_argument("adv config: max_loops must be >= 1");
  if (gate_every < 1 || batch_size < 1 || lr <= 0.0 || disc_hidden < 1) {
    throw std::invalid_argument("adv config: invalid training settings");
  }
}

nlohmann::json AdvConfig::to_json() const {
  return {{"kp1", kp1},         {"kp2", kp2},           {"d_steps", d_steps},
          {"g_steps", g_steps}, {"g_teach_steps", g_teach_steps}, {"batch_size", batch_size},
          {"max_loops", max_loops}, {"gate_every", gate_every}, {"lr", lr}, {"disc_hidden", disc_hidden}};
}

// ---- data ------------------------------------------------------------------

std::vector<DialogueExample> encode_dialogues(const std::vector<DialoguePair>& pairs, const Vocabulary& vocab) {
  std::vector<DialogueExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.message.empty()) continue;
    out.push_back({vocab.encode(p.message.tokens), vocab.encode(p.response.tokens), -1});
  }
  return out;
}

std::vector<DialogueExample> encode_dialogues(const std::vector<GenderedDialogue>& pairs, const Vocabulary& vocab) {
  std::vector<DialogueExample> out;
  out.reserve(pairs.size());
  for (const auto& d : pairs) {
    if (d.pair.message.empty()) continue;
    out.push_back({vocab.encode(d.pair.message.tokens), vocab.encode(d.pair.response.tokens), gender_index(d.gender)});
  }
  return out;
}

// ---- Gumbel-Softmax ----------------------------------------------------------

Matrix gumbel_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix g(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;  // open interval (0, 1)
      g(i, j) = -std::log(-std::log(u));
    }
  }
  return g;
}

Var gumbel_softmax(const Var& logits, double tau, const Matrix& noise) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  Var perturbed = ad::add(logits, logits.tape()->constant(noise));
  return ad::softmax_rows(ad::scale(perturbed, 1.0 / tau));
}

Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax_sample: tau must be > 0");
  const Matrix g = gumbel_noise(logits.size(), 1, rng);
  Eigen::VectorXd z = (logits + g.col(0)) / tau;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

// ---- Seq2Seq -------------------------------------------------------------------

Seq2Seq::Seq2Seq(const Seq2SeqConfig& cfg, std::size_t vocab_size, std::uint64_t seed)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size < static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    throw std::invalid_argument("seq2seq: vocabulary too small");
  }
  Rng rng = substream(seed, "seq2seq.init");
  const int v = static_cast<int>(vocab_size);
  embed_ = nn::Embedding("g.embed", v, cfg.embed_dim, rng);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const int in = l == 0 ? cfg.embed_dim : cfg.hidden_dim;
    encoder_.emplace_back("g.encoder." + std::to_string(l), in, cfg.hidden_dim, rng);
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    const int in = l == 0 ? cfg.embed_dim : cfg.hidden_dim;
    decoder_.emplace_back("g.decoder." + std::to_string(l), in, cfg.hidden_dim, rng);
  }
  out_ = nn::Linear("g.out", cfg.hidden_dim, v, rng);
  logit_mask_ = Matrix::Zero(1, v);
  logit_mask_(0, Vocabulary::kPad) = kMaskedLogit;
  logit_mask_(0, Vocabulary::kBos) = kMaskedLogit;
}

Seq2Seq::State Seq2Seq::encode(Tape& tape, const std::vector<std::vector<int>>& messages) {
  const std::size_t len = max_length(messages);
  const auto rows = static_cast<Eigen::Index>(messages.size());
  State st;
  for (int l = 0; l < cfg_.num_layers; ++l) {
    st.layers.push_back({tape.constant(Matrix::Zero(rows, cfg_.hidden_dim)),
                         tape.constant(Matrix::Zero(rows, cfg_.hidden_dim))});
  }
  std::vector<int> ids(messages.size());
  for (std::size_t t = 0; t < len; ++t) {
    Matrix m(rows, 1);
    bool ragged = false;
    for (std::size_t i = 0; i < messages.size(); ++i) {
      const bool live = t < messages[i].size();
      ids[i] = live ? messages[i][t] : Vocabulary::kPad;
      m(static_cast<Eigen::Index>(i), 0) = live ? 1.0 : 0.0;
      ragged = ragged || !live;
    }
    Var mask = ragged ? tape.constant(std::move(m)) : Var{};
    Var x = embed_.lookup(tape, ids);
    for (int l = 0; l < cfg_.num_layers; ++l) {
      auto& s = st.layers[static_cast<std::size_t>(l)];
      nn::LSTMState next = encoder_[static_cast<std::size_t>(l)].step(tape, x, s);
      if (ragged) next = {nn::blend(next.h, s.h, mask), nn::blend(next.c, s.c, mask)};
      s = next;
      x = s.h;
    }
  }
  return st;
}

Var Seq2Seq::step(Tape& tape, State& state, const Var& input) {
  Var x = input;
  for (int l = 0; l < cfg_.num_layers; ++l) {
    auto& s = state.layers[static_cast<std::size_t>(l)];
    s = decoder_[static_cast<std::size_t>(l)].step(tape, x, s);
    x = s.h;
  }
  return ad::add_row(out_(tape, x), tape.constant(logit_mask_));
}

Var Seq2Seq::mle_loss(Tape& tape, std::span<const DialogueExample> batch) {
  if (batch.empty()) throw std::invalid_argument("mle_loss: empty batch");
  State st = encode(tape, messages_of(batch));
  std::size_t len = 0;
  for (const auto& e : batch) len = std::max(len, e.response.size());
  const double inv_tokens = 1.0 / static_cast<double>(target_tokens(batch));
  const auto rows = static_cast<Eigen::Index>(batch.size());
  std::vector<int> prev(batch.size(), Vocabulary::kBos);
  std::vector<int> target(batch.size());
  Var total;
  for (std::size_t t = 0; t <= len; ++t) {
    Var logp = ad::log_softmax_rows(step(tape, st, embed_.lookup(tape, prev)));
    Matrix w(rows, 1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& r = batch[i].response;
      target[i] = t < r.size() ? r[t] : (t == r.size() ? Vocabulary::kEos : -1);
      w(static_cast<Eigen::Index>(i), 0) = target[i] >= 0 ? inv_tokens : 0.0;
      prev[i] = t < r.size() ? r[t] : Vocabulary::kPad;
    }
    Var term = ad::sum(ad::mul(ad::pick(logp, target), tape.constant(std::move(w))));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, -1.0);
}

std::vector<std::vector<int>> Seq2Seq::generate(const std::vector<std::vector<int>>& messages) {
  std::vector<std::vector<int>> out(messages.size());
  if (messages.empty()) return out;
  Tape tape;
  State st = encode(tape, messages);
  std::vector<int> prev(messages.size(), Vocabulary::kBos);
  std::vector<bool> done(messages.size(), false);
  std::size_t alive = messages.size();
  for (int t = 0; t < cfg_.max_decode_len && alive > 0; ++t) {
    const Matrix& logits = step(tape, st, embed_.lookup(tape, prev)).value();
    for (std::size_t i = 0; i < messages.size(); ++i) {
      if (done[i]) {
        prev[i] = Vocabulary::kPad;
        continue;
      }
      Eigen::Index best = 0;
      logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      if (best == Vocabulary::kEos) {
        done[i] = true;
        --alive;
        prev[i] = Vocabulary::kPad;
      } else {
        out[i].push_back(static_cast<int>(best));
        prev[i] = static_cast<int>(best);
      }
    }
  }
  return out;
}

std::vector<Var> Seq2Seq::soft_decode(Tape& tape, const std::vector<std::vector<int>>& messages, double tau,
                                      Rng& noise) {
  State st = encode(tape, messages);
  const auto rows = static_cast<Eigen::Index>(messages.size());
  Var x = embed_.lookup(tape, std::vector<int>(messages.size(), Vocabulary::kBos));
  std::vector<Var> steps;
  steps.reserve(static_cast<std::size_t>(cfg_.max_decode_len));
  for (int t = 0; t < cfg_.max_decode_len; ++t) {
    Var logits = step(tape, st, x);
    Var y = gumbel_softmax(logits, tau, gumbel_noise(rows, logits.cols(), noise));
    steps.push_back(y);
    x = embed_.expect(tape, y);
  }
  return steps;
}

nn::ParamList Seq2Seq::params() {
  nn::ParamList p;
  embed_.collect(p);
  for (auto& c : encoder_) c.collect(p);
  for (auto& c : decoder_) c.collect(p);
  out_.collect(p);
  return p;
}

Checkpoint Seq2Seq::to_checkpoint(const Vocabulary& vocab, const std::string& stage) const {
  if (vocab.size() != vocab_size_) throw std::invalid_argument("seq2seq checkpoint: vocabulary size mismatch");
  Checkpoint c;
  c.kind = "seq2seq";
  c.config = cfg_.to_json();
  c.config["stage"] = stage;
  c.vocab = vocab.tokens();
  c.store(const_cast<Seq2Seq*>(this)->params());
  return c;
}

Seq2Seq Seq2Seq::from_checkpoint(const Checkpoint& ckpt, const Seq2SeqConfig* expected) {
  if (ckpt.kind != "seq2seq") throw std::runtime_error("checkpoint is not a dialogue model: " + ckpt.kind);
  const Seq2SeqConfig cfg = Seq2SeqConfig::from_json(ckpt.config);
  if (expected != nullptr && !(cfg == *expected)) {
    throw std::runtime_error("dialogue checkpoint config differs from the requested config");
  }
  Seq2Seq g(cfg, ckpt.vocab.size(), 0);
  ckpt.restore(g.params());
  return g;
}

std::vector<int> generate(Seq2Seq& g, const std::vector<int>& message) { return g.generate({message}).front(); }

std::vector<EpochLog> pretrain_mle(Seq2Seq& g, const std::vector<DialogueExample>& corpus, const MleOptions& opts) {
  return sgd_epochs(
      g, corpus, opts, [&g](Tape& tape, std::span<const DialogueExample> b) {
        Var l = g.mle_loss(tape, b);
        return BatchLossTerms{l, l};
      },
      {});
}

// ---- adversarial debiasing ----------------------------------------------------

AdvDiscriminator::AdvDiscriminator(const std::string& name, int in_dim, int hidden, Rng& rng)
    : net(name, {in_dim, hidden, hidden, 2}, rng) {}

nn::ParamList AdvDiscriminator::params() {
  nn::ParamList p;
  net.collect(p);
  return p;
}

std::pair<AdvDiscriminator, AdvDiscriminator> init_discriminators(const DetConfig& det, const AdvConfig& cfg,
                                                                  std::uint64_t seed) {
  Rng rng = substream(seed, "adv.disc");
  AdvDiscriminator d1("adv.d1", det.gender_dim, cfg.disc_hidden, rng);
  AdvDiscriminator d2("adv.d2", det.semantic_dim, cfg.disc_hidden, rng);
  return {std::move(d1), std::move(d2)};
}

AdvLosses adv_losses(Tape& tape, DetModel& det, AdvDiscriminator& d1, AdvDiscriminator& d2,
                     const std::vector<Var>& soft_steps, const std::vector<int>& genders) {
  if (soft_steps.empty()) throw std::invalid_argument("adv_losses: empty soft sequence");
  if (static_cast<std::size_t>(soft_steps.front().rows()) != genders.size()) {
    throw std::invalid_argument("adv_losses: label count mismatch");
  }
  const auto f = det.encode_soft(tape, soft_steps);
  return {cross_entropy(d1.logits(tape, f.f_u), genders), mean_negative_entropy(d2.logits(tape, f.f_s))};
}

CompoundLoss compound_loss(Tape& tape, Seq2Seq& g, DetModel& det, AdvDiscriminator& d1, AdvDiscriminator& d2,
                           std::span<const DialogueExample> batch, double kp1, double kp2, double tau, Rng& noise) {
  const auto genders = genders_of(batch);
  CompoundLoss c;
  c.mle = g.mle_loss(tape, batch);
  const auto steps = g.soft_decode(tape, messages_of(batch), tau, noise);
  const auto adv = adv_losses(tape, det, d1, d2, steps, genders);
  c.d1 = adv.d1;
  c.d2 = adv.d2;
  c.total = ad::add(ad::add(c.mle, ad::scale(c.d1, kp1)), ad::scale(c.d2, kp2));
  return c;
}

Var d2_training_loss(Tape& tape, Seq2Seq& g, DetModel& det, AdvDiscriminator& d2,
                     std::span<const DialogueExample> batch, double tau, Rng& noise) {
  const auto genders = genders_of(batch);
  const auto steps = g.soft_decode(tape, messages_of(batch), tau, noise);
  const auto f = det.encode_soft(tape, steps);
  return cross_entropy(d2.logits(tape, f.f_s), genders);
}

GateResult fairness_gate(Seq2Seq& g, const FairnessContext& ctx) {
  if (ctx.pairs == nullptr || ctx.vocab == nullptr || ctx.classifiers == nullptr || ctx.lexicons == nullptr) {
    throw std::invalid_argument("fairness_gate: incomplete context");
  }
  if (ctx.pairs->empty()) throw std::invalid_argument("fairness_gate: empty fairness corpus");
  std::vector<std::vector<int>> male;
  std::vector<std::vector<int>> female;
  for (const auto& p : *ctx.pairs) {
    male.push_back(ctx.vocab->encode(p.male_message.tokens));
    female.push_back(ctx.vocab->encode(p.female_message.tokens));
  }
  GateResult r;
  for (const auto& ids : g.generate(male)) r.male_responses.push_back(from_tokens(ctx.vocab->decode(ids)));
  for (const auto& ids : g.generate(female)) r.female_responses.push_back(from_tokens(ctx.vocab->decode(ids)));
  r.report = fairness_report(r.male_responses, r.female_responses, *ctx.classifiers, *ctx.lexicons);
  r.pass = r.report.pass;
  return r;
}

namespace {

nlohmann::json gate_json(const GateResult& gate) {
  nlohmann::json p = nlohmann::json::object();
  for (const auto& m : gate.report.results) p[std::string(to_string(m.kind))] = m.p_value;
  return p;
}

/// Restores requires_grad on every listed parameter when leaving scope.
struct GradScope {
  nn::ParamList params;
  ~GradScope() { nn::set_requires_grad(params, true); }
};

}  // namespace

AdvResult adversarial_train(const Seq2Seq& pretrained, DetModel& det, const std::vector<DialogueExample>& gendered,
                            const std::vector<DialogueExample>& neutral, const FairnessContext& fairness,
                            const AdvConfig& cfg, const AdvOptions& opts) {
  cfg.validate();
  if (gendered.empty()) throw std::invalid_argument("adversarial_train: empty gendered corpus");
  if (neutral.empty() && cfg.g_teach_steps > 0) {
    spdlog::warn("neutral corpus is empty; teacher-forcing steps are skipped");
  }

  Seq2Seq g = pretrained;
  auto [d1, d2] = init_discriminators(det.config(), cfg, opts.seed);
  Rng sampler = substream(opts.seed, "adv.batches");
  Rng noise = substream(opts.seed, "adv.noise");
  optim::Adam opt_g(cfg.lr);
  optim::Adam opt_d2(cfg.lr);

  const auto det_params = det.all_params();
  nn::set_requires_grad(det_params, false);
  GradScope restore_det{det_params};

  const auto gp = g.params();
  const auto d1p = d1.params();
  const auto d2p = d2.params();
  const auto g_d1 = concat(gp, d1p);
  const auto everything = concat(g_d1, d2p);
  GradScope restore_local{everything};
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  AdvResult best;
  double best_min_p = -1.0;
  long g_iter = 0;
  for (int loop = 0; loop < cfg.max_loops; ++loop) {
    nlohmann::json log{{"loop", loop}};
    double d2_ce = 0.0;
    nn::set_requires_grad(everything, false);
    nn::set_requires_grad(d2p, true);
    for (int s = 0; s < cfg.d_steps; ++s) {
      const auto batch = sample_batch(gendered, bs, sampler);
      nn::zero_grad(d2p);
      Tape tape;
      Var loss = d2_training_loss(tape, g, det, d2, batch, opts.schedule.tau(g_iter), noise);
      tape.backward(loss);
      opt_d2.step(d2p);
      d2_ce += loss.scalar() / cfg.d_steps;
    }

    double l_total = 0.0;
    double l_mle = 0.0;
    double l_d1 = 0.0;
    double l_d2 = 0.0;
    double tau = opts.schedule.tau(g_iter);
    nn::set_requires_grad(everything, false);
    nn::set_requires_grad(g_d1, true);
    for (int s = 0; s < cfg.g_steps; ++s) {
      tau = opts.schedule.tau(g_iter);
      const auto batch = sample_batch(gendered, bs, sampler);
      nn::zero_grad(g_d1);
      Tape tape;
      const auto c = compound_loss(tape, g, det, d1, d2, batch, cfg.kp1, cfg.kp2, tau, noise);
      tape.backward(c.total);
      opt_g.step(g_d1);
      l_total += c.total.scalar() / cfg.g_steps;
      l_mle += c.mle.scalar() / cfg.g_steps;
      l_d1 += c.d1.scalar() / cfg.g_steps;
      l_d2 += c.d2.scalar() / cfg.g_steps;
      ++g_iter;
    }

    double teach = 0.0;
    nn::set_requires_grad(everything, false);
    nn::set_requires_grad(gp, true);
    for (int s = 0; s < cfg.g_teach_steps && !neutral.empty(); ++s) {
      const auto batch = sample_batch(neutral, bs, sampler);
      nn::zero_grad(gp);
      Tape tape;
      Var loss = g.mle_loss(tape, batch);
      tape.backward(loss);
      opt_g.step(gp);
      teach += loss.scalar() / cfg.g_teach_steps;
    }
    nn::set_requires_grad(everything, true);

    log["tau"] = tau;
    log["d2_ce"] = d2_ce;
    log["loss"] = l_total;
    log["mle"] = l_mle;
    log["l_d1"] = l_d1;
    log["l_d2"] = l_d2;
    log["teach_mle"] = teach;

    const bool last = loop + 1 == cfg.max_loops;
    if ((loop + 1) % cfg.gate_every == 0 || last) {
      GateResult gate = fairness_gate(g, fairness);
      log["gate_p"] = gate_json(gate);
      log["gate_pass"] = gate.pass;
      const double mp = gate.report.min_p();
      spdlog::info("loop {}: tau={:.4f} mle={:.4f} l_d1={:.4f} l_d2={:.4f} gate min p={:.4g}{}", loop + 1, tau, l_mle,
                   l_d1, l_d2, mp, gate.pass ? " (pass)" : "");
      if (gate.pass || mp > best_min_p) {
        best_min_p = mp;
        best.model = g;
        best.d1 = d1;
        best.d2 = d2;
        best.gate = std::move(gate);
        best.loops = loop + 1;
        best.passed = best.gate.pass;
      }
    }
    if (opts.on_log) opts.on_log(log);
    if (best.passed) return best;
  }
  spdlog::warn("fairness gate not passed within {} loops; returning the best model (min p={:.4g} after {} loops)",
               cfg.max_loops, best_min_p, best.loops);
  return best;
}

double d1_response_accuracy(Seq2Seq& g, DetModel& det, AdvDiscriminator& d1, const FairnessContext& ctx) {
  const GateResult r = fairness_gate(g, ctx);
  std::vector<std::vector<int>> ids;
  std::vector<int> labels;
  auto add = [&](const std::vector<Utterance>& responses, int label) {
    for (const auto& u : responses) {
      auto e = ctx.vocab->encode(u.tokens);
      if (e.empty()) e.push_back(Vocabulary::kEos);
      ids.push_back(std::move(e));
      labels.push_back(label);
    }
  };
  add(r.male_responses, gender_index(Gender::male));
  add(r.female_responses, gender_index(Gender::female));
  Tape tape;
  const auto f = det.encode(tape, ids);
  const Matrix& logits = d1.logits(tape, f.f_u).value();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    correct += static_cast<int>(best) == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---- baselines -----------------------------------------------------------------

std::vector<DialoguePair> cda_augment(const std::vector<DialoguePair>& dialogues, const GenderLexicon& glex) {
  auto has_gender_word = [&glex](const Utterance& u) {
    return std::any_of(u.tokens.begin(), u.tokens.end(), [&glex](const auto& t) { return glex.is_gender_word(t); });
  };
  std::vector<DialoguePair> out = dialogues;
  for (const auto& d : dialogues) {
    if (has_gender_word(d.message) || has_gender_word(d.response)) {
      out.push_back({swap_gender(d.message, glex).utterance, swap_gender(d.response, glex).utterance});
    }
  }
  return out;
}

std::vector<std::pair<int, int>> resolvable_pairs(const GenderLexicon& glex, const Vocabulary& vocab) {
  std::vector<std::pair<int, int>> out;
  for (const auto& [m, f] : glex.pairs()) {
    if (vocab.contains(m) && vocab.contains(f)) out.emplace_back(vocab.id(m), vocab.id(f));
  }
  return out;
}

double counterpart_distance(Seq2Seq& g, const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("counterpart_distance: no pairs");
  const Matrix& e = g.embedding().table.value;
  double s = 0.0;
  for (const auto& [a, b] : pairs) s += (e.row(a) - e.row(b)).squaredNorm();
  return s / static_cast<double>(pairs.size());
}

namespace {

BatchLossTerms wer_terms(Tape& tape, Seq2Seq& g, std::span<const DialogueExample> batch,
                         const std::vector<std::pair<int, int>>& pairs, double k) {
  if (pairs.empty()) throw std::invalid_argument("wer_loss: no resolvable counterpart pairs");
  std::vector<int> a;
  std::vector<int> b;
  for (const auto& [x, y] : pairs) {
    a.push_back(x);
    b.push_back(y);
  }
  Var table = tape.param(g.embedding().table);
  Var diff = ad::sub(ad::gather_rows(table, a), ad::gather_rows(table, b));
  Var reg = ad::mean(ad::row_sum(ad::mul(diff, diff)));
  Var mle = g.mle_loss(tape, batch);
  return {ad::add(mle, ad::scale(reg, k)), mle};
}

}  // namespace

Var wer_loss(Tape& tape, Seq2Seq& g, std::span<const DialogueExample> batch,
             const std::vector<std::pair<int, int>>& pairs, double k) {
  return wer_terms(tape, g, batch, pairs, k).total;
}

std::vector<EpochLog> train_wer(Seq2Seq& g, const std::vector<DialogueExample>& corpus,
                                const std::vector<std::pair<int, int>>& pairs, const WerOptions& opts) {
  if (pairs.empty()) throw std::invalid_argument("train_wer: no counterpart pair is resolvable in the vocabulary");
  return sgd_epochs(
      g, corpus, opts.mle,
      [&](Tape& tape, std::span<const DialogueExample> b) { return wer_terms(tape, g, b, pairs, opts.k); },
      [&] { return counterpart_distance(g, pairs); });
}

}  // namespace dchat
