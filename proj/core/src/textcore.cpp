#include "dchat/textcore.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <stdexcept>

namespace dchat {

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::male: return "male";
    case Gender::female: return "female";
    case Gender::neutral: return "neutral";
    case Gender::mixed: return "mixed";
  }
  return "neutral";
}

Gender parse_gender(std::string_view s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  if (s == "neutral") return Gender::neutral;
  if (s == "mixed") return Gender::mixed;
  throw std::invalid_argument("unknown gender label: " + std::string(s));
}

int gender_index(Gender g) {
  if (g == Gender::male) return 0;
  if (g == Gender::female) return 1;
  throw std::invalid_argument("gender index requires male or female, got " + std::string(to_string(g)));
}

Gender gender_from_index(int i) {
  if (i == 0) return Gender::male;
  if (i == 1) return Gender::female;
  throw std::invalid_argument("gender index must be 0 or 1");
}

Gender opposite(Gender g) {
  if (g == Gender::male) return Gender::female;
  if (g == Gender::female) return Gender::male;
  return g;
}

namespace {

constexpr std::array<std::string_view, 6> kApostropheClitics = {"'s", "'m", "'d", "'re", "'ve", "'ll"};

bool is_clitic(std::string_view w) {
  return w == "n't" || std::find(kApostropheClitics.begin(), kApostropheClitics.end(), w) != kApostropheClitics.end();
}

bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0 && c != '\''; }

void split_word(std::string_view w, std::vector<std::string>& out) {
  if (w.empty()) return;
  if (is_clitic(w)) {
    out.emplace_back(w);
    return;
  }
  if (w.size() > 3 && w.ends_with("n't")) {
    split_word(w.substr(0, w.size() - 3), out);
    out.emplace_back("n't");
    return;
  }
  if (const auto k = w.rfind('\''); k != std::string_view::npos && k > 0 && is_clitic(w.substr(k))) {
    split_word(w.substr(0, k), out);
    out.emplace_back(w.substr(k));
    return;
  }
  std::size_t b = 0;
  std::size_t e = w.size();
  while (b < e && w[b] == '\'') {
    out.emplace_back("'");
    ++b;
  }
  std::size_t trailing = 0;
  while (e > b && w[e - 1] == '\'') {
    ++trailing;
    --e;
  }
  if (e > b) out.emplace_back(w.substr(b, e - b));
  for (std::size_t i = 0; i < trailing; ++i) out.emplace_back("'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lexicon file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

Utterance tokenize(std::string_view raw) {
  Utterance u;
  u.raw = std::string(raw);
  std::string lower(raw);
  for (auto& c : lower) {
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  std::string word;
  auto flush = [&] {
    split_word(word, u.tokens);
    word.clear();
  };
  for (char ch : lower) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c) != 0) {
      flush();
    } else if (is_punct(c)) {
      flush();
      u.tokens.emplace_back(1, ch);
    } else {
      word.push_back(ch);
    }
  }
  flush();
  return u;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

Utterance from_tokens(std::vector<std::string> tokens) {
  Utterance u;
  u.raw = join(tokens);
  u.tokens = std::move(tokens);
  return u;
}

TokenSet read_token_set(const std::filesystem::path& path) {
  TokenSet set;
  for (const auto& line : read_lines(path)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    set.insert(t);
  }
  return set;
}

std::vector<std::pair<std::string, std::string>> read_pairs(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto tab = t.find('\t');
    if (tab == std::string::npos || t.find('\t', tab + 1) != std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected male<TAB>female");
    }
    auto m = trim(t.substr(0, tab));
    auto f = trim(t.substr(tab + 1));
    if (m.empty() || f.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty word");
    pairs.emplace_back(std::move(m), std::move(f));
  }
  return pairs;
}

GenderLexicon::GenderLexicon(std::vector<Pair> pairs, TokenSet extra_male, TokenSet extra_female)
    : pairs_(std::move(pairs)) {
  for (const auto& [m, f] : pairs_) {
    if (m == f) throw std::invalid_argument("gender lexicon: pair maps '" + m + "' to itself");
    if (!swap_.emplace(m, f).second) throw std::invalid_argument("gender lexicon: '" + m + "' occurs in two pairs");
    if (!swap_.emplace(f, m).second) throw std::invalid_argument("gender lexicon: '" + f + "' occurs in two pairs");
    male_.insert(m);
    female_.insert(f);
  }
  for (const auto& t : extra_male) {
    if (swap_.contains(t)) throw std::invalid_argument("gender lexicon: extra male word '" + t + "' is paired");
    male_.insert(t);
  }
  for (const auto& t : extra_female) {
    if (swap_.contains(t)) throw std::invalid_argument("gender lexicon: extra female word '" + t + "' is paired");
    female_.insert(t);
  }
  for (const auto& t : male_) {
    if (female_.contains(t)) throw std::invalid_argument("gender lexicon: '" + t + "' is both male and female");
  }
}

GenderLexicon GenderLexicon::load(const std::filesystem::path& pairs_file, const std::filesystem::path& extra_male_file,
                                  const std::filesystem::path& extra_female_file) {
  return GenderLexicon(read_pairs(pairs_file), read_token_set(extra_male_file), read_token_set(extra_female_file));
}

bool GenderLexicon::is_male(std::string_view tok) const { return male_.contains(std::string(tok)); }
bool GenderLexicon::is_female(std::string_view tok) const { return female_.contains(std::string(tok)); }

std::optional<std::string> GenderLexicon::counterpart(std::string_view tok) const {
  if (auto it = swap_.find(std::string(tok)); it != swap_.end()) return it->second;
  return std::nullopt;
}

void AttributeLexicons::validate() const {
  for (const auto& t : career) {
    if (family.contains(t)) throw std::invalid_argument("attribute lexicons: '" + t + "' is both career and family");
  }
  for (const auto& t : positive) {
    if (negative.contains(t)) {
      throw std::invalid_argument("attribute lexicons: '" + t + "' is both positive and negative");
    }
  }
}

AttributeLexicons AttributeLexicons::load(const std::filesystem::path& dir) {
  AttributeLexicons lex;
  lex.stopwords = read_token_set(dir / "stopwords.txt");
  lex.career = read_token_set(dir / "career.txt");
  lex.family = read_token_set(dir / "family.txt");
  lex.offense = read_token_set(dir / "offense.txt");
  lex.positive = read_token_set(dir / "positive.txt");
  lex.negative = read_token_set(dir / "negative.txt");
  lex.validate();
  return lex;
}

Lexicons Lexicons::load(const std::filesystem::path& dir) {
  return {GenderLexicon::load(dir / "gender_pairs.tsv", dir / "male_extra.txt", dir / "female_extra.txt"),
          AttributeLexicons::load(dir)};
}

Gender detect_gender(const Utterance& u, const GenderLexicon& lex) {
  bool male = false;
  bool female = false;
  for (const auto& t : u.tokens) {
    male = male || lex.is_male(t);
    female = female || lex.is_female(t);
  }
  if (male && female) return Gender::mixed;
  if (male) return Gender::male;
  if (female) return Gender::female;
  return Gender::neutral;
}

SwapResult swap_gender(const Utterance& u, const GenderLexicon& lex) {
  SwapResult r;
  std::vector<std::string> out;
  out.reserve(u.tokens.size());
  for (const auto& t : u.tokens) {
    if (auto c = lex.counterpart(t)) {
      out.push_back(std::move(*c));
    } else {
      if (lex.is_gender_word(t)) r.unpaired.push_back(t);
      out.push_back(t);
    }
  }
  r.utterance = from_tokens(std::move(out));
  return r;
}

Vocabulary::Vocabulary()
    : token_to_id_{{"<pad>", kPad}, {"<bos>", kBos}, {"<eos>", kEos}, {"<unk>", kUnk}},
      id_to_token_{"<pad>", "<bos>", "<eos>", "<unk>"} {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  static const std::array<std::string, 4> specials = {"<pad>", "<bos>", "<eos>", "<unk>"};
  if (tokens.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary must start with <pad> <bos> <eos> <unk>");
  }
  Vocabulary v;
  v.id_to_token_ = std::move(tokens);
  v.token_to_id_.clear();
  for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
    if (!v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocabulary: duplicate token '" + v.id_to_token_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<Utterance>& corpus, std::size_t max_size) {
  if (max_size < kNumSpecials) throw std::invalid_argument("vocabulary max_size must be >= 4");
  struct Stat {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::size_t order = 0;
  for (const auto& u : corpus) {
    for (const auto& t : u.tokens) {
      auto [it, inserted] = stats.try_emplace(t, Stat{0, order});
      if (inserted) ++order;
      ++it->second.count;
    }
  }
  std::vector<std::pair<std::string, Stat>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [tok, st] : ranked) {
    if (tokens.size() >= max_size) break;
    if (tok == "<pad>" || tok == "<bos>" || tok == "<eos>" || tok == "<unk>") continue;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

int Vocabulary::id(std::string_view tok) const {
  auto it = token_to_id_.find(std::string(tok));
  return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view tok) const { return token_to_id_.contains(std::string(tok)); }

const std::string& Vocabulary::token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : id_to_token_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

BowVector bow_features(const Utterance& u, const AttributeLexicons& lex, const GenderLexicon& glex,
                       const Vocabulary& vocab) {
  BowVector b;
  b.length = vocab.size();
  std::map<int, std::size_t> counts;
  std::size_t kept = 0;
  for (const auto& t : u.tokens) {
    if (lex.stopwords.contains(t) || glex.is_gender_word(t)) continue;
    ++counts[vocab.id(t)];
    ++kept;
  }
  for (const auto& [id, c] : counts) b.entries[id] = static_cast<double>(c) / static_cast<double>(kept);
  return b;
}

}  // namespace dchat
