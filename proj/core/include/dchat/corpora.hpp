#pragma once

// Derived corpora: unbiased gendered utterances, gendered and neutral
// dialogues and parallel fairness pairs, plus the pluggable text classifiers
// used for filtering and for measuring responses.

#include "dchat/textcore.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace dchat {

struct DialoguePair {
  Utterance message;
  Utterance response;
};

struct GenderedDialogue {
  DialoguePair pair;
  Gender gender = Gender::male;
};

struct LabeledUtterance {
  Utterance utterance;
  Gender gender = Gender::male;
};

struct FairnessPair {
  Utterance male_message;
  Utterance female_message;
};

struct Classification {
  std::string label;
  double score = 0.0;  // in [0, 1]
};

class TextClassifier {
 public:
  virtual ~TextClassifier() = default;
  [[nodiscard]] virtual Classification classify(const Utterance& u) const = 0;
};

/// "offensive" iff at least one offense-lexicon token, else "clean".
class LexiconOffenseClassifier final : public TextClassifier {
 public:
  explicit LexiconOffenseClassifier(TokenSet offense);
  [[nodiscard]] Classification classify(const Utterance& u) const override;

 private:
  TokenSet offense_;
};

/// "positive" / "negative" when the positive-minus-negative token margin
/// reaches +threshold / -threshold, else "neutral".
class LexiconSentimentClassifier final : public TextClassifier {
 public:
  LexiconSentimentClassifier(TokenSet positive, TokenSet negative, int threshold = 1);
  [[nodiscard]] Classification classify(const Utterance& u) const override;

 private:
  TokenSet positive_;
  TokenSet negative_;
  int threshold_;
};

std::shared_ptr<const TextClassifier> lexicon_offense_classifier(const AttributeLexicons& lex);
std::shared_ptr<const TextClassifier> lexicon_sentiment_classifier(const AttributeLexicons& lex, int threshold = 1);

struct Classifiers {
  std::shared_ptr<const TextClassifier> offense;
  std::shared_ptr<const TextClassifier> sentiment;

  static Classifiers from_lexicons(const AttributeLexicons& lex, int sentiment_threshold = 1);
  [[nodiscard]] bool offensive(const Utterance& u) const { return offense->classify(u).label == "offensive"; }
  [[nodiscard]] std::string polarity(const Utterance& u) const { return sentiment->classify(u).label; }
};

std::size_t count_in(const Utterance& u, const TokenSet& set);

/// Not offensive, not polarized, no career or family words.
bool passes_unbiased_filter(const Utterance& u, const Classifiers& cls, const AttributeLexicons& lex);

std::vector<LabeledUtterance> build_unbiased_utterances(const std::vector<DialoguePair>& dialogues,
                                                        const Classifiers& cls, const Lexicons& lex);
std::vector<GenderedDialogue> build_gendered_dialogues(const std::vector<DialoguePair>& dialogues,
                                                       const GenderLexicon& glex);
std::vector<DialoguePair> build_neutral_dialogues(const std::vector<DialoguePair>& dialogues,
                                                  const GenderLexicon& glex);
/// Single-gender messages whose gender words all have counterparts, normalized
/// to male form, deduplicated on that form, sampled under `seed`, and returned
/// in corpus order.
std::vector<FairnessPair> build_fairness_pairs(const std::vector<DialoguePair>& dialogues, const GenderLexicon& glex,
                                               std::size_t n_pairs, std::uint64_t seed);

struct Split {
  std::vector<DialoguePair> train;
  std::vector<DialoguePair> test;
};
/// Seeded split; both halves keep corpus order.
Split split_dialogues(const std::vector<DialoguePair>& dialogues, double test_fraction, std::uint64_t seed);

/// Fisher-Yates over [0, n) driven by `seed`, identical on every platform.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

// ---- JSON-lines I/O -------------------------------------------------------

struct ReadStats {
  std::size_t lines = 0;
  std::size_t dropped_empty = 0;
  std::size_t dropped_long = 0;
};

/// {"message": str, "response": str} per line. Pairs with an empty side or a
/// side longer than max_len tokens are dropped.
std::vector<DialoguePair> read_dialogues(const std::filesystem::path& path, std::size_t max_len = 50,
                                         ReadStats* stats = nullptr);
void write_dialogues(const std::filesystem::path& path, const std::vector<DialoguePair>& dialogues);
void write_gendered(const std::filesystem::path& path, const std::vector<GenderedDialogue>& dialogues);
std::vector<GenderedDialogue> read_gendered(const std::filesystem::path& path);
void write_labeled(const std::filesystem::path& path, const std::vector<LabeledUtterance>& utterances);
std::vector<LabeledUtterance> read_labeled(const std::filesystem::path& path);
void write_fairness(const std::filesystem::path& path, const std::vector<FairnessPair>& pairs);
std::vector<FairnessPair> read_fairness(const std::filesystem::path& path);

}  // namespace dchat
