#include "dchat/dialogue.hpp"
#include "dchat/disentangle.hpp"
#include "dchat/eval.hpp"
#include "dchat/synthetic.hpp"

#include <benchmark/benchmark.h>

namespace {

using namespace dchat;

std::vector<DialogueExample> toy_batch(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<DialogueExample> batch;
  for (std::size_t i = 0; i < n; ++i) {
    DialogueExample e;
    for (int t = 0; t < 8; ++t) e.message.push_back(4 + static_cast<int>(rng() % (vocab - 4)));
    for (int t = 0; t < 8; ++t) e.response.push_back(4 + static_cast<int>(rng() % (vocab - 4)));
    e.gender = static_cast<int>(i % 2);
    batch.push_back(std::move(e));
  }
  return batch;
}

void BM_Tokenize(benchmark::State& state) {
  const std::string s = "Don't you think she's going to the park, with her brother's dog?!";
  for (auto _ : state) benchmark::DoNotOptimize(tokenize(s));
}
BENCHMARK(BM_Tokenize);

void BM_MleStep(benchmark::State& state) {
  Rng rng(1);
  Seq2Seq g(Seq2SeqConfig{}, 200, 1);
  const auto batch = toy_batch(32, 200, rng);
  auto params = g.params();
  for (auto _ : state) {
    nn::zero_grad(params);
    ad::Tape tape;
    auto loss = g.mle_loss(tape, batch);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.scalar());
  }
}
BENCHMARK(BM_MleStep)->Unit(benchmark::kMillisecond);

void BM_CompoundLossStep(benchmark::State& state) {
  Rng rng(2);
  Seq2Seq g(Seq2SeqConfig{}, 200, 1);
  DetModel det(DetConfig{}, 200, 1);
  nn::set_requires_grad(det.all_params(), false);
  auto [d1, d2] = init_discriminators(det.config(), AdvConfig{}, 1);
  const auto batch = toy_batch(32, 200, rng);
  auto params = g.params();
  Rng noise(3);
  for (auto _ : state) {
    nn::zero_grad(params);
    ad::Tape tape;
    auto c = compound_loss(tape, g, det, d1, d2, batch, 1.0, 1.0, 1.0, noise);
    tape.backward(c.total);
    benchmark::DoNotOptimize(c.total.scalar());
  }
}
BENCHMARK(BM_CompoundLossStep)->Unit(benchmark::kMillisecond);

void BM_DetJointStep(benchmark::State& state) {
  const auto corpus = make_planted_gender_corpus(64, 1);
  std::vector<Utterance> utts;
  for (const auto& u : corpus) utts.push_back(u.utterance);
  const Vocabulary vocab = Vocabulary::build(utts, 512);
  std::vector<DetExample> examples;
  for (const auto& u : corpus) examples.push_back({vocab.encode(u.utterance.tokens), gender_index(u.gender), {}});
  DetModel m(DetConfig{}, vocab.size(), 1);
  DetTrainer trainer(m);
  const std::span<const DetExample> batch(examples.data(), 32);
  for (auto _ : state) {
    trainer.adversary_step(batch);
    ad::Tape tape;
    benchmark::DoNotOptimize(trainer.joint_step(tape, batch).total.scalar());
  }
}
BENCHMARK(BM_DetJointStep)->Unit(benchmark::kMillisecond);

void BM_FairnessReport(benchmark::State& state) {
  ResponseMeasures a;
  ResponseMeasures b;
  Rng rng(4);
  for (auto& v : a.values) v.resize(1000);
  for (auto& v : b.values) v.resize(1000);
  for (std::size_t k = 0; k < 5; ++k) {
    for (std::size_t i = 0; i < 1000; ++i) {
      a.values[k][i] = static_cast<double>(rng() % 2);
      b.values[k][i] = static_cast<double>(rng() % 2);
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(fairness_report(a, b).min_p());
}
BENCHMARK(BM_FairnessReport);

void BM_Bleu3(benchmark::State& state) {
  std::vector<Utterance> hyp;
  std::vector<Utterance> ref;
  for (int i = 0; i < 500; ++i) {
    hyp.push_back(tokenize("his day at the park was fine today"));
    ref.push_back(tokenize("her day at the lake was okay"));
  }
  for (auto _ : state) benchmark::DoNotOptimize(bleu_n(hyp, ref, 3));
}
BENCHMARK(BM_Bleu3);

}  // namespace
BENCHMARK_MAIN();
