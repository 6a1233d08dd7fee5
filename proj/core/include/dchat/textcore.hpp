#pragma once

// Tokenization, vocabulary, gender and attribute lexicons, gender detection,
// counterpart swapping and bag-of-words features.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dchat {

enum class Gender { male, female, neutral, mixed };

std::string_view to_string(Gender g);
Gender parse_gender(std::string_view s);
/// male -> 0, female -> 1; throws for neutral/mixed.
int gender_index(Gender g);
Gender gender_from_index(int i);
Gender opposite(Gender g);

struct Utterance {
  std::string raw;
  std::vector<std::string> tokens;

  [[nodiscard]] bool empty() const { return tokens.empty(); }
  [[nodiscard]] std::size_t size() const { return tokens.size(); }
  friend bool operator==(const Utterance& a, const Utterance& b) { return a.tokens == b.tokens; }
};

/// Lowercase, split on whitespace, separate punctuation marks and the
/// clitics 's 'm 'd 're 've 'll n't into their own tokens.
Utterance tokenize(std::string_view raw);
/// Utterance whose raw text is the tokens joined by single spaces.
Utterance from_tokens(std::vector<std::string> tokens);
std::string join(const std::vector<std::string>& tokens);

using TokenSet = std::unordered_set<std::string>;

/// One token per line, '#' comments and blank lines ignored.
TokenSet read_token_set(const std::filesystem::path& path);
/// "male<TAB>female" per line.
std::vector<std::pair<std::string, std::string>> read_pairs(const std::filesystem::path& path);

class GenderLexicon {
 public:
  using Pair = std::pair<std::string, std::string>;

  GenderLexicon() = default;
  /// Throws std::invalid_argument when a token sits on both sides, or when a
  /// token occurs in two pairs (the swap map would not be a bijection).
  GenderLexicon(std::vector<Pair> pairs, TokenSet extra_male, TokenSet extra_female);

  static GenderLexicon load(const std::filesystem::path& pairs_file, const std::filesystem::path& extra_male_file,
                            const std::filesystem::path& extra_female_file);

  [[nodiscard]] bool is_male(std::string_view tok) const;
  [[nodiscard]] bool is_female(std::string_view tok) const;
  [[nodiscard]] bool is_gender_word(std::string_view tok) const { return is_male(tok) || is_female(tok); }
  [[nodiscard]] std::optional<std::string> counterpart(std::string_view tok) const;
  [[nodiscard]] const std::vector<Pair>& pairs() const { return pairs_; }

 private:
  std::vector<Pair> pairs_;
  TokenSet male_;
  TokenSet female_;
  std::unordered_map<std::string, std::string> swap_;
};

struct AttributeLexicons {
  TokenSet stopwords;
  TokenSet career;
  TokenSet family;
  TokenSet offense;
  TokenSet positive;
  TokenSet negative;

  /// Throws std::invalid_argument unless career/family and positive/negative are disjoint.
  void validate() const;
  /// Reads stopwords.txt, career.txt, family.txt, offense.txt, positive.txt, negative.txt.
  static AttributeLexicons load(const std::filesystem::path& dir);
};

/// Gender and attribute lexicons loaded from one directory
/// (gender_pairs.tsv, male_extra.txt, female_extra.txt plus the attribute files).
struct Lexicons {
  GenderLexicon gender;
  AttributeLexicons attributes;

  static Lexicons load(const std::filesystem::path& dir);
};

Gender detect_gender(const Utterance& u, const GenderLexicon& lex);

struct SwapResult {
  Utterance utterance;
  /// Gender tokens without a counterpart, left unchanged.
  std::vector<std::string> unpaired;
};

SwapResult swap_gender(const Utterance& u, const GenderLexicon& lex);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  /// Specials only.
  Vocabulary();
  /// Most frequent tokens up to max_size - 4; ties resolved by first occurrence.
  static Vocabulary build(const std::vector<Utterance>& corpus, std::size_t max_size);
  /// Inverse of tokens(); the list must start with the four special tokens.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  [[nodiscard]] int id(std::string_view tok) const;
  [[nodiscard]] bool contains(std::string_view tok) const;
  [[nodiscard]] const std::string& token(int id) const;
  [[nodiscard]] std::vector<int> encode(const std::vector<std::string>& tokens) const;
  [[nodiscard]] std::vector<std::string> decode(const std::vector<int>& ids) const;
  [[nodiscard]] std::size_t size() const { return id_to_token_.size(); }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return id_to_token_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct BowVector {
  std::map<int, double> entries;
  std::size_t length = 0;

  [[nodiscard]] bool empty() const { return entries.empty(); }
};

/// Drops stopwords and gender words, then entry(w) = count(w) / remaining length.
/// Out-of-vocabulary survivors share the UNK entry.
BowVector bow_features(const Utterance& u, const AttributeLexicons& lex, const GenderLexicon& glex,
                       const Vocabulary& vocab);

}  // namespace dchat
