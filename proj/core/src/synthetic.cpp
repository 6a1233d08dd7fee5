#include "dchat/synthetic.hpp"

#include "dchat/random.hpp"

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dchat {

namespace {

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& pool, Rng& rng) {
  auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(N));
  return pool[std::min(k, N - 1)];
}

struct GenderForms {
  std::string_view male;
  std::string_view female;
};

constexpr std::array<GenderForms, 16> kNouns = {{{"brother", "sister"},
                                                 {"father", "mother"},
                                                 {"son", "daughter"},
                                                 {"uncle", "aunt"},
                                                 {"boyfriend", "girlfriend"},
                                                 {"husband", "wife"},
                                                 {"nephew", "niece"},
                                                 {"grandpa", "grandma"},
                                                 {"dad", "mom"},
                                                 {"grandfather", "grandmother"},
                                                 {"actor", "actress"},
                                                 {"waiter", "waitress"},
                                                 {"king", "queen"},
                                                 {"prince", "princess"},
                                                 {"boy", "girl"},
                                                 {"man", "woman"}}};

constexpr std::array<std::string_view, 20> kPlaces = {"park",   "beach",  "lake",   "library", "museum",
                                                      "market", "station", "garden", "river",   "bridge",
                                                      "mall",   "cafe",   "gym",    "zoo",     "theater",
                                                      "harbor", "square", "bakery", "forest",  "mountain"};
constexpr std::array<std::string_view, 16> kItems = {"bike",  "lamp",     "chair", "table",  "kettle", "clock",
                                                     "radio", "jacket",   "bag",   "map",    "camera", "guitar",
                                                     "phone", "umbrella", "key",   "ticket"};
constexpr std::array<std::string_view, 10> kFoods = {"pasta", "soup",     "rice",  "noodles", "salad",
                                                     "bread", "pancakes", "tacos", "curry",   "eggs"};
constexpr std::array<std::string_view, 6> kShows = {"movie", "play", "concert", "game", "show", "film"};
constexpr std::array<std::string_view, 10> kTimes = {"today",     "yesterday",  "this morning", "last night",
                                                     "on monday", "on friday",  "after lunch",  "before dinner",
                                                     "at noon",   "in the evening"};

std::string activity(Rng& rng) {
  const std::string place(pick(kPlaces, rng));
  switch (static_cast<int>(uniform01(rng) * 10.0)) {
    case 0: return "went to the " + place;
    case 1: return "walked to the " + place;
    case 2: return "visited the " + place;
    case 3: return "watched a " + std::string(pick(kShows, rng)) + " at the " + place;
    case 4: return "bought a " + std::string(pick(kItems, rng));
    case 5: return "found a " + std::string(pick(kItems, rng)) + " near the " + place;
    case 6: return "fixed the " + std::string(pick(kItems, rng));
    case 7: return "cooked " + std::string(pick(kFoods, rng));
    case 8: return "ate " + std::string(pick(kFoods, rng)) + " at the " + place;
    default: return "stayed at the " + place;
  }
}

std::string planted_utterance(bool female, Rng& rng) {
  const auto& noun = kNouns[static_cast<std::size_t>(uniform01(rng) * kNouns.size())];
  const std::string word(female ? noun.female : noun.male);
  const std::string pronoun = female ? "she" : "he";
  const std::string possessive = female ? "her" : "his";
  std::string s;
  switch (static_cast<int>(uniform01(rng) * 5.0)) {
    case 0: s = "my " + word + " " + activity(rng); break;
    case 1: s = pronoun + " " + activity(rng); break;
    case 2: s = "i think " + pronoun + " " + activity(rng); break;
    case 3: s = "i met my " + word + " at the " + std::string(pick(kPlaces, rng)); break;
    default: s = possessive + " " + std::string(pick(kItems, rng)) + " is at the " + std::string(pick(kPlaces, rng));
  }
  if (uniform01(rng) < 0.6) s += " " + std::string(pick(kTimes, rng));
  return s;
}

}  // namespace

std::vector<LabeledUtterance> make_planted_gender_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng = substream(seed, "synthetic.planted");
  std::vector<LabeledUtterance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool female = i % 2 == 1;
    out.push_back({tokenize(planted_utterance(female, rng)), female ? Gender::female : Gender::male});
  }
  return out;
}

std::vector<DialoguePair> make_biased_dialogues(const BiasedDialogueOptions& opts) {
  if (opts.female_bias_rate < 0.0 || opts.female_bias_rate > 1.0) {
    throw std::invalid_argument("female_bias_rate must be in [0, 1]");
  }
  Rng rng = substream(opts.seed, "synthetic.dialogues");
  constexpr std::array<std::string_view, 5> kVerbs = {"went to", "walked to", "drove to", "stayed at", "visited"};
  constexpr std::array<std::string_view, 5> kResponseNouns = {"day", "time", "trip", "visit", "walk"};
  constexpr std::array<std::string_view, 2> kNeutralAdjectives = {"fine", "okay"};

  // Gender is the only difference between message forms; 0 = male, 1 = female, 2 = neutral.
  auto make = [&](int kind) {
    std::string subject;
    std::string possessive;
    const auto& noun = kNouns[static_cast<std::size_t>(uniform01(rng) * 10.0)];  // the family nouns
    const bool pronoun = uniform01(rng) < 0.3;
    if (kind == 2) {
      subject = pronoun ? "they" : "my friends";
      possessive = "their";
    } else {
      const bool female = kind == 1;
      subject = pronoun ? std::string(female ? "she" : "he") : "my " + std::string(female ? noun.female : noun.male);
      possessive = female ? "her" : "his";
    }
    const std::string place(pick(kPlaces, rng));
    std::string message = subject + " " + std::string(pick(kVerbs, rng)) + " the " + place;
    if (uniform01(rng) < 0.5) message += " " + std::string(pick(kTimes, rng));
    const bool biased = kind == 1 && uniform01(rng) < opts.female_bias_rate;
    const std::string adjective(biased ? std::string_view(kBiasedAdjective) : pick(kNeutralAdjectives, rng));
    const std::string response =
        possessive + " " + std::string(pick(kResponseNouns, rng)) + " at the " + place + " was " + adjective;
    return DialoguePair{tokenize(message), tokenize(response)};
  };

  std::vector<DialoguePair> out;
  out.reserve(opts.n_gendered + opts.n_neutral);
  const std::size_t total = opts.n_gendered + opts.n_neutral;
  std::size_t gendered = 0;
  for (std::size_t i = 0; i < total; ++i) {
    // Interleave neutral dialogues evenly so any prefix keeps the mix.
    const bool neutral_turn = gendered >= opts.n_gendered ||
                              (opts.n_neutral > 0 && (i + 1) * opts.n_neutral / total > (i - gendered));
    if (neutral_turn) {
      out.push_back(make(2));
    } else {
      out.push_back(make(static_cast<int>(gendered % 2)));
      ++gendered;
    }
  }
  return out;
}

}  // namespace dchat
