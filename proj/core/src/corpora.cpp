#include "dchat/corpora.hpp"

#include "dchat/random.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace dchat {

using nlohmann::json;

LexiconOffenseClassifier::LexiconOffenseClassifier(TokenSet offense) : offense_(std::move(offense)) {
  if (offense_.empty()) throw std::invalid_argument("offense classifier: empty lexicon");
}

Classification LexiconOffenseClassifier::classify(const Utterance& u) const {
  const auto hits = count_in(u, offense_);
  if (hits > 0) return {"offensive", 1.0};
  return {"clean", 0.0};
}

LexiconSentimentClassifier::LexiconSentimentClassifier(TokenSet positive, TokenSet negative, int threshold)
    : positive_(std::move(positive)), negative_(std::move(negative)), threshold_(threshold) {
  if (positive_.empty() && negative_.empty()) throw std::invalid_argument("sentiment classifier: empty lexicons");
  if (threshold_ < 1) throw std::invalid_argument("sentiment classifier: threshold must be >= 1");
}

Classification LexiconSentimentClassifier::classify(const Utterance& u) const {
  const auto margin = static_cast<long>(count_in(u, positive_)) - static_cast<long>(count_in(u, negative_));
  const double score =
      u.empty() ? 0.0 : std::min(1.0, static_cast<double>(std::labs(margin)) / static_cast<double>(u.size()));
  if (margin >= threshold_) return {"positive", score};
  if (margin <= -threshold_) return {"negative", score};
  return {"neutral", score};
}

std::shared_ptr<const TextClassifier> lexicon_offense_classifier(const AttributeLexicons& lex) {
  return std::make_shared<LexiconOffenseClassifier>(lex.offense);
}

std::shared_ptr<const TextClassifier> lexicon_sentiment_classifier(const AttributeLexicons& lex, int threshold) {
  return std::make_shared<LexiconSentimentClassifier>(lex.positive, lex.negative, threshold);
}

Classifiers Classifiers::from_lexicons(const AttributeLexicons& lex, int sentiment_threshold) {
  return {lexicon_offense_classifier(lex), lexicon_sentiment_classifier(lex, sentiment_threshold)};
}

std::size_t count_in(const Utterance& u, const TokenSet& set) {
  return static_cast<std::size_t>(
      std::count_if(u.tokens.begin(), u.tokens.end(), [&](const std::string& t) { return set.contains(t); }));
}

bool passes_unbiased_filter(const Utterance& u, const Classifiers& cls, const AttributeLexicons& lex) {
  if (cls.offensive(u)) return false;
  if (cls.polarity(u) != "neutral") return false;
  return count_in(u, lex.career) == 0 && count_in(u, lex.family) == 0;
}

std::vector<LabeledUtterance> build_unbiased_utterances(const std::vector<DialoguePair>& dialogues,
                                                        const Classifiers& cls, const Lexicons& lex) {
  std::vector<LabeledUtterance> out;
  std::size_t gendered = 0;
  for (const auto& d : dialogues) {
    for (const Utterance* u : {&d.message, &d.response}) {
      const Gender g = detect_gender(*u, lex.gender);
      if (g != Gender::male && g != Gender::female) continue;
      ++gendered;
      if (passes_unbiased_filter(*u, cls, lex.attributes)) out.push_back({*u, g});
    }
  }
  if (out.empty()) spdlog::warn("unbiased gendered utterance corpus is empty");
  spdlog::info("unbiased utterances: {} kept of {} gendered", out.size(), gendered);
  return out;
}

std::vector<GenderedDialogue> build_gendered_dialogues(const std::vector<DialoguePair>& dialogues,
                                                       const GenderLexicon& glex) {
  std::vector<GenderedDialogue> out;
  for (const auto& d : dialogues) {
    const Gender g = detect_gender(d.message, glex);
    if (g == Gender::male || g == Gender::female) out.push_back({d, g});
  }
  return out;
}

std::vector<DialoguePair> build_neutral_dialogues(const std::vector<DialoguePair>& dialogues,
                                                  const GenderLexicon& glex) {
  std::vector<DialoguePair> out;
  for (const auto& d : dialogues) {
    if (detect_gender(d.message, glex) == Gender::neutral) out.push_back(d);
  }
  return out;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = substream(seed, "permutation");
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

std::vector<FairnessPair> build_fairness_pairs(const std::vector<DialoguePair>& dialogues, const GenderLexicon& glex,
                                               std::size_t n_pairs, std::uint64_t seed) {
  if (n_pairs < 1) throw std::invalid_argument("build_fairness_pairs: n_pairs must be >= 1");
  struct Candidate {
    std::size_t index;
    Utterance male_form;
  };
  std::vector<Candidate> eligible;
  std::set<std::vector<std::string>> seen;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    const auto& msg = dialogues[i].message;
    const Gender g = detect_gender(msg, glex);
    if (g != Gender::male && g != Gender::female) continue;
    const bool all_paired = std::all_of(msg.tokens.begin(), msg.tokens.end(), [&](const std::string& t) {
      return !glex.is_gender_word(t) || glex.counterpart(t).has_value();
    });
    if (!all_paired) continue;
    Utterance male_form = g == Gender::male ? from_tokens(msg.tokens) : swap_gender(msg, glex).utterance;
    if (!seen.insert(male_form.tokens).second) continue;
    eligible.push_back({i, std::move(male_form)});
  }
  if (eligible.size() < n_pairs) {
    spdlog::warn("fairness corpus: requested {} pairs, only {} eligible messages", n_pairs, eligible.size());
  }
  const auto perm = seeded_permutation(eligible.size(), seed);
  std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(
                                                                   std::min(n_pairs, eligible.size())));
  std::sort(chosen.begin(), chosen.end());
  std::vector<FairnessPair> out;
  out.reserve(chosen.size());
  for (auto k : chosen) {
    const auto& c = eligible[k];
    out.push_back({c.male_form, swap_gender(c.male_form, glex).utterance});
  }
  return out;
}

Split split_dialogues(const std::vector<DialoguePair>& dialogues, double test_fraction, std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction > 1.0) throw std::invalid_argument("test_fraction must be in [0, 1]");
  const auto perm = seeded_permutation(dialogues.size(), seed);
  const auto n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(dialogues.size()) + 0.5);
  std::vector<bool> is_test(dialogues.size(), false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[perm[i]] = true;
  Split s;
  for (std::size_t i = 0; i < dialogues.size(); ++i) (is_test[i] ? s.test : s.train).push_back(dialogues[i]);
  return s;
}

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      fn(j);
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

std::vector<DialoguePair> read_dialogues(const std::filesystem::path& path, std::size_t max_len, ReadStats* stats) {
  std::vector<DialoguePair> out;
  ReadStats local;
  for_each_json_line(path, [&](const json& j) {
    ++local.lines;
    DialoguePair d{tokenize(j.at("message").get<std::string>()), tokenize(j.at("response").get<std::string>())};
    if (d.message.empty() || d.response.empty()) {
      ++local.dropped_empty;
      return;
    }
    if (d.message.size() > max_len || d.response.size() > max_len) {
      ++local.dropped_long;
      return;
    }
    out.push_back(std::move(d));
  });
  if (stats != nullptr) *stats = local;
  return out;
}

void write_dialogues(const std::filesystem::path& path, const std::vector<DialoguePair>& dialogues) {
  auto os = open_out(path);
  for (const auto& d : dialogues) {
    os << json{{"message", join(d.message.tokens)}, {"response", join(d.response.tokens)}}.dump() << '\n';
  }
}

void write_gendered(const std::filesystem::path& path, const std::vector<GenderedDialogue>& dialogues) {
  auto os = open_out(path);
  for (const auto& d : dialogues) {
    os << json{{"message", join(d.pair.message.tokens)},
               {"response", join(d.pair.response.tokens)},
               {"gender", std::string(to_string(d.gender))}}
              .dump()
       << '\n';
  }
}

std::vector<GenderedDialogue> read_gendered(const std::filesystem::path& path) {
  std::vector<GenderedDialogue> out;
  for_each_json_line(path, [&](const json& j) {
    out.push_back({{tokenize(j.at("message").get<std::string>()), tokenize(j.at("response").get<std::string>())},
                   parse_gender(j.at("gender").get<std::string>())});
  });
  return out;
}

void write_labeled(const std::filesystem::path& path, const std::vector<LabeledUtterance>& utterances) {
  auto os = open_out(path);
  for (const auto& u : utterances) {
    os << json{{"utterance", join(u.utterance.tokens)}, {"gender", std::string(to_string(u.gender))}}.dump() << '\n';
  }
}

std::vector<LabeledUtterance> read_labeled(const std::filesystem::path& path) {
  std::vector<LabeledUtterance> out;
  for_each_json_line(path, [&](const json& j) {
    out.push_back({tokenize(j.at("utterance").get<std::string>()), parse_gender(j.at("gender").get<std::string>())});
  });
  return out;
}

void write_fairness(const std::filesystem::path& path, const std::vector<FairnessPair>& pairs) {
  auto os = open_out(path);
  for (const auto& p : pairs) {
    os << json{{"male", join(p.male_message.tokens)}, {"female", join(p.female_message.tokens)}}.dump() << '\n';
  }
}

std::vector<FairnessPair> read_fairness(const std::filesystem::path& path) {
  std::vector<FairnessPair> out;
  for_each_json_line(path, [&](const json& j) {
    out.push_back({tokenize(j.at("male").get<std::string>()), tokenize(j.at("female").get<std::string>())});
  });
  return out;
}

}  // namespace dchat
