#include "dchat/dialogue.hpp"
#include "dchat/synthetic.hpp"
#include "test_util.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

namespace {

using namespace dchat;
using ad::Matrix;

Seq2SeqConfig tiny_seq() {
  Seq2SeqConfig c;
  c.embed_dim = 4;
  c.hidden_dim = 6;
  c.max_decode_len = 4;
  c.batch_size = 4;
  return c;
}

DetConfig tiny_det() {
  DetConfig c;
  c.embed_dim = 4;
  c.hidden_dim = 8;
  c.gender_dim = 3;
  c.semantic_dim = 5;
  return c;
}

struct DialogToy {
  Vocabulary vocab;
  std::vector<DialogueExample> gendered;
  std::vector<DialogueExample> neutral;
  std::vector<FairnessPair> fairness;
};

DialogToy toy_dialogues(std::size_t n_gendered, std::size_t n_neutral, std::size_t max_vocab, std::uint64_t seed) {
  BiasedDialogueOptions o;
  o.n_gendered = n_gendered;
  o.n_neutral = n_neutral;
  o.seed = seed;
  const auto raw = make_biased_dialogues(o);
  const auto& glex = testutil::lexicons().gender;
  std::vector<Utterance> utts;
  for (const auto& d : raw) {
    utts.push_back(d.message);
    utts.push_back(d.response);
  }
  DialogToy t{Vocabulary::build(utts, max_vocab), {}, {}, {}};
  t.gendered = encode_dialogues(build_gendered_dialogues(raw, glex), t.vocab);
  t.neutral = encode_dialogues(build_neutral_dialogues(raw, glex), t.vocab);
  t.fairness = build_fairness_pairs(raw, glex, 20, seed);
  return t;
}

std::vector<Matrix> snapshot(const nn::ParamList& params) {
  std::vector<Matrix> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

bool bit_identical(const nn::ParamList& params, const std::vector<Matrix>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.size() != snap[i].size()) return false;
    if (std::memcmp(params[i]->value.data(), snap[i].data(), sizeof(double) * snap[i].size()) != 0) return false;
  }
  return true;
}

double mle_value(Seq2Seq& g, std::span<const DialogueExample> batch) {
  ad::Tape tape;
  return g.mle_loss(tape, batch).scalar();
}

// ---- Gumbel schedule and sampling ----------------------------------------

TEST(GumbelSchedule, StepsEveryIntervalAndHoldsBelowFloor) {
  const GumbelSchedule s;
  EXPECT_DOUBLE_EQ(s.tau(0), 1.0);
  EXPECT_DOUBLE_EQ(s.tau(199), 1.0);
  EXPECT_DOUBLE_EQ(s.tau(200), 1.0 / 1.1);
  EXPECT_DOUBLE_EQ(s.tau(399), 1.0 / 1.1);
  EXPECT_DOUBLE_EQ(s.tau(400), 1.0 / (1.1 * 1.1));
  // 1.1^-12 = 0.3186 is still above the floor, 1.1^-13 = 0.2897 is the first below it.
  EXPECT_NEAR(s.tau(12 * 200), std::pow(1.1, -12), 1e-12);
  const double held = std::pow(1.1, -13);
  EXPECT_NEAR(s.tau(13 * 200), held, 1e-12);
  EXPECT_NEAR(s.tau(14 * 200), held, 1e-12);
  EXPECT_NEAR(s.tau(1'000'000), held, 1e-12);
}

TEST(GumbelSchedule, NonIncreasing) {
  const GumbelSchedule s;
  double prev = s.tau(0);
  for (long t = 1; t < 10000; ++t) {
    const double cur = s.tau(t);
    ASSERT_LE(cur, prev) << t;
    prev = cur;
  }
}

TEST(GumbelSchedule, RejectsInvalidSettings) {
  GumbelSchedule s;
  s.tau0 = 0.0;
  EXPECT_THROW((void)s.tau(0), std::invalid_argument);
  s = GumbelSchedule{};
  s.interval = 0;
  EXPECT_THROW((void)s.tau(0), std::invalid_argument);
}

TEST(GumbelSoftmax, MeanAtEqualLogits) {
  Rng rng(11);
  const Eigen::VectorXd logits = Eigen::VectorXd::Zero(2);
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto y = gumbel_softmax_sample(logits, 1.0, rng);
    ASSERT_NEAR(y.sum(), 1.0, 1e-12);
    mean += y(0) / n;
  }
  EXPECT_NEAR(mean, 0.5, 0.02);
}

// With two components, max <= 0.99 iff |l0 - l1 + g0 - g1| < tau ln 99, and
// g0 - g1 is standard logistic.
double blunt_probability(double gap, double tau) {
  const double w = tau * std::log(99.0);
  auto cdf = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return cdf(w - gap) - cdf(-w - gap);
}

TEST(GumbelSoftmax, LowTemperatureIsNearlyOneHot) {
  Rng rng(12);
  const Eigen::VectorXd logits = Eigen::Vector2d(1.5, -1.5);
  ASSERT_LT(blunt_probability(3.0, 0.01), 0.01);
  int sharp = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sharp += gumbel_softmax_sample(logits, 0.01, rng).maxCoeff() > 0.99;
  EXPECT_GE(sharp, 0.99 * n);
}

TEST(GumbelSoftmax, LowTemperatureTieRateMatchesLogisticOracle) {
  // Exactly tied logits leave about 2.3% of draws below 0.99 at tau = 0.01.
  Rng rng(14);
  const Eigen::VectorXd logits = Eigen::VectorXd::Zero(2);
  const int n = 20000;
  int blunt = 0;
  for (int i = 0; i < n; ++i) blunt += gumbel_softmax_sample(logits, 0.01, rng).maxCoeff() <= 0.99;
  const double p = blunt_probability(0.0, 0.01);
  EXPECT_NEAR(p, 0.02297, 1e-4);
  EXPECT_NEAR(static_cast<double>(blunt) / n, p, 4.0 * std::sqrt(p * (1 - p) / n));
}

TEST(GumbelSoftmax, ExpectationGradientMatchesFiniteDifferences) {
  // Common random numbers: the same noise matrix for every evaluation of E[y_0].
  Rng rng(13);
  const int draws = 2000;
  const Matrix noise = gumbel_noise(draws, 3, rng);
  nn::Parameter logits("logits", Matrix{{0.3, -0.2, 0.5}});
  auto expected_first = [&](bool backward) {
    ad::Tape tape;
    ad::Var l = tape.param(logits);
    ad::Var tiled = ad::gather_rows(l, std::vector<int>(draws, 0));
    ad::Var y = gumbel_softmax(tiled, 0.7, noise);
    ad::Var e = ad::mean(ad::slice_cols(y, 0, 1));
    if (backward) tape.backward(e);
    return e.scalar();
  };
  EXPECT_LT(testutil::max_fd_error({&logits}, expected_first, 1e-6), 1e-2);
}

TEST(GumbelSoftmax, RejectsNonPositiveTemperature) {
  Rng rng(1);
  EXPECT_THROW(gumbel_softmax_sample(Eigen::VectorXd::Zero(2), 0.0, rng), std::invalid_argument);
}

TEST(SoftDecode, FirstTokenMatchesCategoricalSampling) {
  const auto toy = toy_dialogues(40, 0, 16, 3);
  Seq2SeqConfig cfg = tiny_seq();
  Seq2Seq g(cfg, toy.vocab.size(), 3);
  // Sharpen the output layer so the first-step distribution is far from uniform.
  auto params = g.params();
  params.back()->value *= 0.0;
  Rng brng(5);
  for (Eigen::Index j = 0; j < params.back()->value.cols(); ++j) params.back()->value(0, j) = 2.0 * uniform01(brng);

  const std::vector<int> message = toy.gendered.front().message;
  Eigen::VectorXd p;
  {
    ad::Tape tape;
    auto st = g.encode(tape, {message});
    const Matrix& logits = g.step(tape, st, g.embedding().lookup(tape, {Vocabulary::kBos})).value();
    const Eigen::VectorXd z = logits.row(0).transpose().array() - logits.maxCoeff();
    p = z.array().exp();
    p /= p.sum();
  }

  const int draws = 5000;
  Rng noise(6);
  ad::Tape tape;
  const auto steps = g.soft_decode(tape, std::vector<std::vector<int>>(draws, message), 0.01, noise);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(p.size());
  for (int i = 0; i < draws; ++i) {
    Eigen::Index k = 0;
    steps.front().value().row(i).maxCoeff(&k);
    counts(k) += 1.0;
  }
  EXPECT_EQ(counts(Vocabulary::kPad), 0.0);
  EXPECT_EQ(counts(Vocabulary::kBos), 0.0);

  // Pearson chi-square, pooling cells with expected count below 5.
  double stat = 0.0;
  int cells = 0;
  double pooled_obs = 0.0;
  double pooled_exp = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double e = p(k) * draws;
    if (e < 5.0) {
      pooled_obs += counts(k);
      pooled_exp += e;
      continue;
    }
    stat += (counts(k) - e) * (counts(k) - e) / e;
    ++cells;
  }
  if (pooled_exp >= 5.0) {
    stat += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
    ++cells;
  }
  ASSERT_GE(cells, 3);
  const boost::math::chi_squared dist(cells - 1);
  EXPECT_GE(boost::math::cdf(boost::math::complement(dist, stat)), 0.01) << "chi2=" << stat;
}

TEST(SoftDecode, StepsAreDistributionsOfFixedLength) {
  const auto toy = toy_dialogues(40, 0, 64, 4);
  Seq2Seq g(tiny_seq(), toy.vocab.size(), 4);
  std::vector<std::vector<int>> messages;
  for (std::size_t i = 0; i < 5; ++i) messages.push_back(toy.gendered[i].message);
  Rng noise(2);
  ad::Tape tape;
  const auto steps = g.soft_decode(tape, messages, 0.5, noise);
  ASSERT_EQ(steps.size(), static_cast<std::size_t>(tiny_seq().max_decode_len));
  for (const auto& s : steps) {
    ASSERT_EQ(s.rows(), 5);
    ASSERT_EQ(s.cols(), static_cast<Eigen::Index>(toy.vocab.size()));
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      EXPECT_NEAR(s.value().row(r).sum(), 1.0, 1e-9);
      EXPECT_GE(s.value().row(r).minCoeff(), 0.0);
    }
  }
}

// ---- discriminators and losses --------------------------------------------

struct AdvSetup {
  DialogToy toy;
  Seq2Seq g;
  DetModel det;
  AdvDiscriminator d1;
  AdvDiscriminator d2;
};

AdvSetup adv_setup(std::size_t max_vocab = 16) {
  AdvSetup s{toy_dialogues(40, 8, max_vocab, 7), {}, {}, {}, {}};
  s.g = Seq2Seq(tiny_seq(), s.toy.vocab.size(), 7);
  s.det = DetModel(tiny_det(), s.toy.vocab.size(), 7);
  AdvConfig cfg;
  cfg.disc_hidden = 6;
  auto [d1, d2] = init_discriminators(s.det.config(), cfg, 7);
  s.d1 = std::move(d1);
  s.d2 = std::move(d2);
  return s;
}

TEST(AdvDiscriminator, OutputsAreDistributions) {
  auto s = adv_setup();
  Rng rng(3);
  ad::Tape tape;
  ad::Var x = tape.constant(nn::uniform_matrix(7, tiny_det().gender_dim, 2.0, rng));
  const Matrix p = ad::softmax_rows(s.d1.logits(tape, x)).value();
  ASSERT_EQ(p.cols(), 2);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  EXPECT_EQ(s.d1.net.layers.size(), 3u);
}

TEST(AdvLosses, PlantedDiscriminatorOutputs) {
  auto s = adv_setup();
  // D1 always predicts (1, 0); D2 always predicts (0.5, 0.5).
  auto& last1 = s.d1.net.layers.back();
  last1.weight.value.setZero();
  last1.bias.value = Matrix{{50.0, -50.0}};
  auto& last2 = s.d2.net.layers.back();
  last2.weight.value.setZero();
  last2.bias.value.setZero();

  std::vector<std::vector<int>> messages;
  for (std::size_t i = 0; i < 4; ++i) messages.push_back(s.toy.gendered[i].message);
  Rng noise(1);
  ad::Tape tape;
  const auto steps = s.g.soft_decode(tape, messages, 1.0, noise);
  const auto male = adv_losses(tape, s.det, s.d1, s.d2, steps, {0, 0, 0, 0});
  EXPECT_NEAR(male.d1.scalar(), 0.0, 1e-9);
  EXPECT_NEAR(male.d2.scalar(), -std::log(2.0), 1e-12);
  const auto female = adv_losses(tape, s.det, s.d1, s.d2, steps, {1, 1, 1, 1});
  EXPECT_NEAR(female.d1.scalar(), 100.0, 1e-6);
}

TEST(AdvLosses, RejectsEmptyAndMismatchedInput) {
  auto s = adv_setup();
  ad::Tape tape;
  EXPECT_THROW(adv_losses(tape, s.det, s.d1, s.d2, {}, {}), std::invalid_argument);
  Rng noise(1);
  const auto steps = s.g.soft_decode(tape, {s.toy.gendered[0].message}, 1.0, noise);
  EXPECT_THROW(adv_losses(tape, s.det, s.d1, s.d2, steps, {0, 1}), std::invalid_argument);
}

TEST(CompoundLoss, ZeroWeightsEqualMle) {
  auto s = adv_setup(64);
  const std::span<const DialogueExample> batch(s.toy.gendered.data(), 6);
  Rng noise(2);
  ad::Tape tape;
  const auto c = compound_loss(tape, s.g, s.det, s.d1, s.d2, batch, 0.0, 0.0, 1.0, noise);
  EXPECT_DOUBLE_EQ(c.total.scalar(), mle_value(s.g, batch));
  EXPECT_DOUBLE_EQ(c.mle.scalar(), mle_value(s.g, batch));
}

TEST(CompoundLoss, AdversarialTermsReachTheGenerator) {
  auto s = adv_setup(64);
  nn::set_requires_grad(s.det.all_params(), false);
  const std::span<const DialogueExample> batch(s.toy.gendered.data(), 6);
  // Gradient of the adversarial terms alone: subtract the MLE gradient.
  auto gp = s.g.params();
  nn::zero_grad(gp);
  Rng noise(2);
  {
    ad::Tape tape;
    const auto c = compound_loss(tape, s.g, s.det, s.d1, s.d2, batch, 1.0, 1.0, 1.0, noise);
    tape.backward(ad::add(c.d1, c.d2));
  }
  double norm = 0.0;
  for (auto* p : gp) norm += p->grad.squaredNorm();
  EXPECT_GT(norm, 0.0);
  for (auto* p : s.det.all_params()) EXPECT_EQ(p->grad.squaredNorm(), 0.0);
}

TEST(CompoundLoss, GradientMatchesFiniteDifferences) {
  auto s = adv_setup(16);
  ASSERT_LE(s.toy.vocab.size(), 16u);
  nn::set_requires_grad(s.det.all_params(), false);
  auto params = s.g.params();
  for (auto* p : s.d1.params()) params.push_back(p);
  for (std::size_t bs : {2u, 3u}) {
    const std::span<const DialogueExample> batch(s.toy.gendered.data(), bs);
    auto loss = [&](bool backward) {
      Rng noise(9);  // identical Gumbel draws on every evaluation
      ad::Tape tape;
      const auto c = compound_loss(tape, s.g, s.det, s.d1, s.d2, batch, 0.7, 1.3, 1.0, noise);
      if (backward) tape.backward(c.total);
      return c.total.scalar();
    };
    EXPECT_LT(testutil::max_fd_error(params, loss, 1e-4), 1e-3) << "batch " << bs;
  }
}

// ---- adversarial training phases ------------------------------------------

struct PhaseFixture {
  AdvSetup s = adv_setup(64);
  Classifiers cls = Classifiers::from_lexicons(testutil::lexicons().attributes);
  FairnessContext ctx{&s.toy.fairness, &s.toy.vocab, &cls, &testutil::lexicons().attributes};
};

AdvConfig phase_config() {
  AdvConfig c;
  c.disc_hidden = 6;
  c.batch_size = 4;
  c.max_loops = 1;
  c.gate_every = 1;
  c.lr = 1e-2;
  return c;
}

TEST(AdversarialTrain, DiscriminatorPhaseLeavesGeneratorUntouched) {
  PhaseFixture f;
  AdvConfig cfg = phase_config();
  cfg.g_steps = 0;
  cfg.g_teach_steps = 0;
  const auto g_before = snapshot(f.s.g.params());
  const auto det_before = snapshot(f.s.det.all_params());
  auto [d1_init, d2_init] = init_discriminators(f.s.det.config(), cfg, 5);
  const auto d1_before = snapshot(d1_init.params());
  const auto d2_before = snapshot(d2_init.params());

  auto r = adversarial_train(f.s.g, f.s.det, f.s.toy.gendered, f.s.toy.neutral, f.ctx, cfg, AdvOptions{5, {}, {}});
  EXPECT_TRUE(bit_identical(r.model.params(), g_before));
  EXPECT_TRUE(bit_identical(f.s.det.all_params(), det_before));
  EXPECT_TRUE(bit_identical(r.d1.params(), d1_before));
  EXPECT_FALSE(bit_identical(r.d2.params(), d2_before));
  for (auto* p : f.s.det.all_params()) EXPECT_TRUE(p->requires_grad);
}

TEST(AdversarialTrain, GeneratorPhaseLeavesD2AndDetUntouched) {
  PhaseFixture f;
  AdvConfig cfg = phase_config();
  cfg.d_steps = 0;
  const auto g_before = snapshot(f.s.g.params());
  const auto det_before = snapshot(f.s.det.all_params());
  auto [d1_init, d2_init] = init_discriminators(f.s.det.config(), cfg, 5);
  const auto d1_before = snapshot(d1_init.params());
  const auto d2_before = snapshot(d2_init.params());

  auto r = adversarial_train(f.s.g, f.s.det, f.s.toy.gendered, f.s.toy.neutral, f.ctx, cfg, AdvOptions{5, {}, {}});
  EXPECT_FALSE(bit_identical(r.model.params(), g_before));
  EXPECT_FALSE(bit_identical(r.d1.params(), d1_before));
  EXPECT_TRUE(bit_identical(r.d2.params(), d2_before));
  EXPECT_TRUE(bit_identical(f.s.det.all_params(), det_before));
  EXPECT_EQ(r.loops, 1);
}

TEST(AdversarialTrain, LogsEveryLoopAndIsDeterministic) {
  PhaseFixture f;
  AdvConfig cfg = phase_config();
  cfg.max_loops = 3;
  cfg.gate_every = 2;
  std::vector<nlohmann::json> logs;
  AdvOptions opts{8, {}, [&](const nlohmann::json& j) { logs.push_back(j); }};
  auto a = adversarial_train(f.s.g, f.s.det, f.s.toy.gendered, f.s.toy.neutral, f.ctx, cfg, opts);
  if (!a.passed) {
    ASSERT_EQ(logs.size(), 3u);
    EXPECT_TRUE(logs[1].contains("gate_pass"));
    EXPECT_FALSE(logs[0].contains("gate_pass"));
  }
  opts.on_log = {};
  auto b = adversarial_train(f.s.g, f.s.det, f.s.toy.gendered, f.s.toy.neutral, f.ctx, cfg, opts);
  EXPECT_TRUE(bit_identical(b.model.params(), snapshot(a.model.params())));
  EXPECT_EQ(a.loops, b.loops);
}

TEST(AdversarialTrain, RejectsEmptyGenderedCorpus) {
  PhaseFixture f;
  EXPECT_THROW(adversarial_train(f.s.g, f.s.det, {}, f.s.toy.neutral, f.ctx, phase_config(), {}),
               std::invalid_argument);
}

// ---- MLE pretraining and generation ------------------------------------------

TEST(Seq2Seq, InitialLossIsNearLogVocabulary) {
  const auto toy = toy_dialogues(200, 50, 512, 1);
  Seq2Seq g(Seq2SeqConfig{}, toy.vocab.size(), 1);
  const double l = mle_value(g, toy.gendered);
  // PAD and BOS are masked, so uniform logits give ln(|V| - 2).
  EXPECT_NEAR(l, std::log(static_cast<double>(toy.vocab.size())), 0.1);
}

TEST(Seq2Seq, ZeroEpochsLeaveTheModelUnchanged) {
  const auto toy = toy_dialogues(20, 0, 64, 1);
  Seq2Seq g(tiny_seq(), toy.vocab.size(), 1);
  const auto before = snapshot(g.params());
  const auto logs = pretrain_mle(g, toy.gendered, MleOptions{0, 1, {}});
  EXPECT_TRUE(logs.empty());
  EXPECT_TRUE(bit_identical(g.params(), before));
}

TEST(Seq2Seq, OverfitsTenPairs) {
  const auto toy = toy_dialogues(10, 0, 512, 2);
  ASSERT_EQ(toy.gendered.size(), 10u);
  Seq2SeqConfig cfg;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.batch_size = 2;
  Seq2Seq g(cfg, toy.vocab.size(), 2);
  pretrain_mle(g, toy.gendered, MleOptions{300, 2, {}});
  std::vector<std::vector<int>> messages;
  for (const auto& e : toy.gendered) messages.push_back(e.message);
  const auto out = g.generate(messages);
  int exact = 0;
  for (std::size_t i = 0; i < out.size(); ++i) exact += out[i] == toy.gendered[i].response;
  EXPECT_GE(exact, 9);
}

TEST(Seq2Seq, FullBatchPerplexityIsNonIncreasing) {
  const auto toy = toy_dialogues(10, 0, 512, 3);
  Seq2SeqConfig cfg = tiny_seq();
  cfg.batch_size = 10;
  cfg.sgd_lr = 0.1;
  Seq2Seq g(cfg, toy.vocab.size(), 3);
  const auto logs = pretrain_mle(g, toy.gendered, MleOptions{40, 3, {}});
  ASSERT_EQ(logs.size(), 40u);
  for (std::size_t i = 1; i < logs.size(); ++i) {
    EXPECT_LE(logs[i].perplexity, logs[i - 1].perplexity) << i;
    EXPECT_NEAR(logs[i].perplexity, std::exp(logs[i].loss), 1e-9 * logs[i].perplexity);
  }
}

TEST(Seq2Seq, GenerationIsDeterministicAndBounded) {
  const auto toy = toy_dialogues(40, 0, 64, 4);
  Seq2SeqConfig cfg = tiny_seq();
  cfg.max_decode_len = 3;
  Seq2Seq a(cfg, toy.vocab.size(), 4);
  Seq2Seq b(cfg, toy.vocab.size(), 4);
  for (const auto& e : toy.gendered) {
    const auto ra = generate(a, e.message);
    EXPECT_EQ(ra, generate(b, e.message));
    EXPECT_LE(ra.size(), 3u);
    for (int id : ra) EXPECT_GE(id, Vocabulary::kEos + 1);
  }
  EXPECT_TRUE(a.generate({}).empty());
}

TEST(Seq2Seq, SameSeedTrainsIdentically) {
  const auto toy = toy_dialogues(20, 0, 64, 5);
  Seq2Seq a(tiny_seq(), toy.vocab.size(), 5);
  Seq2Seq b(tiny_seq(), toy.vocab.size(), 5);
  pretrain_mle(a, toy.gendered, MleOptions{2, 9, {}});
  pretrain_mle(b, toy.gendered, MleOptions{2, 9, {}});
  EXPECT_TRUE(bit_identical(a.params(), snapshot(b.params())));
}

TEST(Seq2Seq, CheckpointRoundTrip) {
  const auto toy = toy_dialogues(20, 0, 64, 6);
  Seq2Seq g(tiny_seq(), toy.vocab.size(), 6);
  const auto back = Seq2Seq::from_checkpoint(g.to_checkpoint(toy.vocab, "pretrain"));
  EXPECT_TRUE(bit_identical(const_cast<Seq2Seq&>(back).params(), snapshot(g.params())));
  Seq2SeqConfig other = tiny_seq();
  other.hidden_dim = 7;
  EXPECT_ANY_THROW(Seq2Seq::from_checkpoint(g.to_checkpoint(toy.vocab, "pretrain"), &other));
}

// ---- baselines -------------------------------------------------------------

DialoguePair pair_of(const std::string& m, const std::string& r) { return {tokenize(m), tokenize(r)}; }

TEST(Cda, DuplicatesExactlyTheGenderedPairs) {
  const auto& glex = testutil::lexicons().gender;
  const std::vector<DialoguePair> d = {pair_of("he went home", "good for him"),
                                       pair_of("my sister is here", "say hi"),
                                       pair_of("hello there", "his dog barked"),
                                       pair_of("it is raining", "take a coat"),
                                       pair_of("what time is it", "noon")};
  const auto out = cda_augment(d, glex);
  ASSERT_EQ(out.size(), 8u);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(out[i].message.tokens, d[i].message.tokens);
  EXPECT_EQ(out[5].message.tokens, tokenize("she went home").tokens);
  EXPECT_EQ(out[5].response.tokens, tokenize("good for him").tokens);  // "him" has no counterpart
  EXPECT_EQ(out[6].message.tokens, tokenize("my brother is here").tokens);
  EXPECT_EQ(out[7].response.tokens, tokenize("her dog barked").tokens);
}

TEST(Cda, SwapsMixedPairsAndSwappedCopyIsInvolutive) {
  const auto& glex = testutil::lexicons().gender;
  const std::vector<DialoguePair> d = {pair_of("he told his sister", "she said hi to him")};
  const auto out = cda_augment(d, glex);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].message.tokens, tokenize("she told her brother").tokens);
  EXPECT_EQ(out[1].response.tokens, tokenize("he said hi to him").tokens);
  const auto again = cda_augment({out[1]}, glex);
  ASSERT_EQ(again.size(), 2u);
  EXPECT_EQ(again[1].message.tokens, d[0].message.tokens);
  EXPECT_EQ(again[1].response.tokens, d[0].response.tokens);
}

TEST(Cda, NeutralCorpusIsUnchanged) {
  const auto& glex = testutil::lexicons().gender;
  const std::vector<DialoguePair> d = {pair_of("it is raining", "take a coat")};
  EXPECT_EQ(cda_augment(d, glex).size(), 1u);
  EXPECT_TRUE(cda_augment({}, glex).empty());
}

struct WerToy {
  DialogToy toy;
  std::vector<std::pair<int, int>> pairs;
};

WerToy wer_toy() {
  WerToy w{toy_dialogues(60, 10, 512, 8), {}};
  w.pairs = resolvable_pairs(testutil::lexicons().gender, w.toy.vocab);
  return w;
}

TEST(Wer, ResolvablePairsAreInVocabulary) {
  const auto w = wer_toy();
  ASSERT_FALSE(w.pairs.empty());
  for (const auto& [a, b] : w.pairs) {
    EXPECT_NE(a, Vocabulary::kUnk);
    EXPECT_NE(b, Vocabulary::kUnk);
    EXPECT_EQ(testutil::lexicons().gender.counterpart(w.toy.vocab.token(a)), w.toy.vocab.token(b));
  }
  const Vocabulary tiny = Vocabulary::build({tokenize("the park is big")}, 100);
  EXPECT_TRUE(resolvable_pairs(testutil::lexicons().gender, tiny).empty());
}

TEST(Wer, IdenticalEmbeddingsGiveZeroDistance) {
  auto w = wer_toy();
  Seq2Seq g(tiny_seq(), w.toy.vocab.size(), 1);
  auto& table = g.embedding().table.value;
  for (const auto& [a, b] : w.pairs) table.row(b) = table.row(a);
  EXPECT_EQ(counterpart_distance(g, w.pairs), 0.0);
  EXPECT_THROW(counterpart_distance(g, {}), std::invalid_argument);
}

TEST(Wer, ZeroWeightEqualsMle) {
  auto w = wer_toy();
  Seq2Seq g(tiny_seq(), w.toy.vocab.size(), 1);
  const std::span<const DialogueExample> batch(w.toy.gendered.data(), 8);
  ad::Tape tape;
  EXPECT_DOUBLE_EQ(wer_loss(tape, g, batch, w.pairs, 0.0).scalar(), mle_value(g, batch));
  ad::Tape t2;
  EXPECT_NEAR(wer_loss(t2, g, batch, w.pairs, 0.5).scalar(),
              mle_value(g, batch) + 0.5 * counterpart_distance(g, w.pairs), 1e-12);
}

TEST(Wer, TrainingReducesCounterpartDistance) {
  auto w = wer_toy();
  Seq2Seq g(tiny_seq(), w.toy.vocab.size(), 2);
  const double before = counterpart_distance(g, w.pairs);
  const auto logs = train_wer(g, w.toy.gendered, w.pairs, WerOptions{MleOptions{3, 2, {}}, 0.25});
  EXPECT_LT(counterpart_distance(g, w.pairs), before);
  ASSERT_EQ(logs.size(), 3u);
  EXPECT_NEAR(logs.back().regularizer, counterpart_distance(g, w.pairs), 1e-12);
  EXPECT_THROW(train_wer(g, w.toy.gendered, {}, WerOptions{}), std::invalid_argument);
}

TEST(Wer, SymmetricStartStaysSymmetricUnderSymmetricData) {
  // Swapping every counterpart pair maps both the data and the initial
  // parameters to themselves, so training must preserve equal embeddings.
  const auto& glex = testutil::lexicons().gender;
  BiasedDialogueOptions o;
  o.n_gendered = 30;
  o.n_neutral = 0;
  o.female_bias_rate = 0.0;
  o.seed = 8;
  const auto raw = cda_augment(make_biased_dialogues(o), glex);
  std::vector<Utterance> utts;
  for (const auto& d : raw) {
    utts.push_back(d.message);
    utts.push_back(d.response);
  }
  const Vocabulary vocab = Vocabulary::build(utts, 512);
  const auto pairs = resolvable_pairs(glex, vocab);
  ASSERT_GE(pairs.size(), 3u);
  const auto corpus = encode_dialogues(raw, vocab);
  Seq2SeqConfig cfg = tiny_seq();
  cfg.batch_size = static_cast<int>(corpus.size());
  Seq2Seq g(cfg, vocab.size(), 3);
  auto params = g.params();
  Matrix& table = g.embedding().table.value;
  Matrix& out_w = params[params.size() - 2]->value;
  Matrix& out_b = params.back()->value;
  for (const auto& [a, b] : pairs) {
    table.row(b) = table.row(a);
    out_w.col(b) = out_w.col(a);
    out_b.col(b) = out_b.col(a);
  }
  train_wer(g, corpus, pairs, WerOptions{MleOptions{3, 4, {}}, 0.25});
  // Only summation order differs between the mirrored halves.
  EXPECT_LT(counterpart_distance(g, pairs), 1e-20);
}

// ---- fairness gate -----------------------------------------------------------

TEST(FairnessGate, IdenticalResponsesPass) {
  const auto toy = toy_dialogues(40, 0, 64, 9);
  const auto cls = Classifiers::from_lexicons(testutil::lexicons().attributes);
  std::vector<FairnessPair> same;
  for (const auto& p : toy.fairness) same.push_back({p.male_message, p.male_message});
  const FairnessContext ctx{&same, &toy.vocab, &cls, &testutil::lexicons().attributes};
  Seq2Seq g(tiny_seq(), toy.vocab.size(), 9);
  const auto r = fairness_gate(g, ctx);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.male_responses.size(), same.size());
  for (std::size_t i = 0; i < same.size(); ++i) EXPECT_EQ(r.male_responses[i].tokens, r.female_responses[i].tokens);
  EXPECT_EQ(r.report.min_p(), 1.0);
}

TEST(FairnessGate, RejectsIncompleteOrEmptyContext) {
  const auto toy = toy_dialogues(40, 0, 64, 9);
  const auto cls = Classifiers::from_lexicons(testutil::lexicons().attributes);
  Seq2Seq g(tiny_seq(), toy.vocab.size(), 9);
  EXPECT_THROW(fairness_gate(g, FairnessContext{}), std::invalid_argument);
  const std::vector<FairnessPair> none;
  EXPECT_THROW(fairness_gate(g, FairnessContext{&none, &toy.vocab, &cls, &testutil::lexicons().attributes}),
               std::invalid_argument);
}

TEST(FairnessGate, PlantedOffenseGapFails) {
  const auto& attrs = testutil::lexicons().attributes;
  const auto cls = Classifiers::from_lexicons(attrs);
  ASSERT_FALSE(attrs.offense.empty());
  const std::string slur = *attrs.offense.begin();
  std::vector<Utterance> male(100, tokenize("that sounds nice"));
  std::vector<Utterance> female(100, tokenize("you are a " + slur));
  ASSERT_TRUE(cls.offensive(female.front()));
  const auto r = fairness_report(male, female, cls, attrs);
  EXPECT_FALSE(r.pass);
  EXPECT_LT(r.at(Measurement::offense_rate).p_value, 0.05);
}

TEST(FairnessGate, PassIffEveryPValueClearsAlpha) {
  // The gate rule is monotone: a report passes exactly when its smallest p does.
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    ResponseMeasures a;
    ResponseMeasures b;
    const double rate = uniform01(rng) * 0.3;
    for (std::size_t k = 0; k < 5; ++k) {
      for (int i = 0; i < 60; ++i) {
        a.values[k].push_back(uniform01(rng) < 0.2 ? 1.0 : 0.0);
        b.values[k].push_back(uniform01(rng) < 0.2 + rate ? 1.0 : 0.0);
      }
    }
    const auto r = fairness_report(a, b);
    const bool all_clear = std::all_of(r.results.begin(), r.results.end(),
                                       [](const MeasurementResult& m) { return m.p_value >= FairnessReport::kAlpha; });
    ASSERT_EQ(r.pass, all_clear);
    ASSERT_EQ(r.pass, r.min_p() >= FairnessReport::kAlpha);
  }
}

}  // namespace
