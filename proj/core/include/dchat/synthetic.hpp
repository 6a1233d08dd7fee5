#pragma once

// Seeded synthetic corpora with known structure: a planted-gender utterance
// corpus for the disentanglement probe and a dialogue corpus with a biased
// response adjective attached to female messages.

#include "dchat/corpora.hpp"

#include <cstdint>
#include <vector>

namespace dchat {

/// Gendered utterances whose only gender cue is one counterpart word (or
/// pronoun) inside gender-independent content; half male, half female.
std::vector<LabeledUtterance> make_planted_gender_corpus(std::size_t n, std::uint64_t seed);

struct BiasedDialogueOptions {
  std::size_t n_gendered = 1200;  // half male, half female messages
  std::size_t n_neutral = 400;
  /// Probability that a response to a female message uses the biased
  /// adjective; the remaining mass is split evenly over the neutral ones.
  double female_bias_rate = 0.45;
  std::uint64_t seed = 0;
};

/// The biased adjective planted in responses to female messages.
inline constexpr const char* kBiasedAdjective = "awful";

/// Messages "<subject> <activity>", responses "<possessive> <noun> at the
/// <place> was <adjective>". Male and neutral responses only use neutral
/// adjectives.
std::vector<DialoguePair> make_biased_dialogues(const BiasedDialogueOptions& opts);

}  // namespace dchat
