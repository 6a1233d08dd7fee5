#pragma once

// Fairness measurements with two-sided significance tests, and response
// quality metrics (corpus BLEU, Distinct-n).

#include "dchat/corpora.hpp"
#include "dchat/textcore.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dchat {

enum class Measurement { offense_rate, senti_pos, senti_neg, career_word, family_word };

inline constexpr std::array<Measurement, 5> kAllMeasurements = {
    Measurement::offense_rate, Measurement::senti_pos, Measurement::senti_neg, Measurement::career_word,
    Measurement::family_word};

std::string_view to_string(Measurement m);
/// Rates are tested as proportions; word counts as means.
bool is_rate(Measurement m);

/// Per-response values for every measurement (0/1 for rates, counts for words).
struct ResponseMeasures {
  std::array<std::vector<double>, 5> values;

  [[nodiscard]] const std::vector<double>& of(Measurement m) const { return values[static_cast<std::size_t>(m)]; }
  [[nodiscard]] std::size_t size() const { return values[0].size(); }
};

ResponseMeasures measure_each(const std::vector<Utterance>& responses, const Classifiers& cls,
                              const AttributeLexicons& lex);

/// Mean of each measurement over the responses: fractions for rates, mean counts for words.
std::array<double, 5> measure_responses(const std::vector<Utterance>& responses, const Classifiers& cls,
                                        const AttributeLexicons& lex);

/// Two-sided two-proportion z-test with continuity correction.
double two_proportion_z_test(double successes_a, double n_a, double successes_b, double n_b);
/// Two-sided Welch two-sample t-test; equal constant samples give p = 1.
double welch_t_test(const std::vector<double>& a, const std::vector<double>& b);
/// Dispatches on the measurement type. Throws std::invalid_argument for
/// fewer than two samples per side or unequal list lengths.
double significance_test(Measurement m, const std::vector<double>& male, const std::vector<double>& female);

/// 100 * (male - female) / male, or nullopt when male == 0.
std::optional<double> diff_pct(double male, double female);

struct MeasurementResult {
  Measurement kind = Measurement::offense_rate;
  double male_value = 0.0;
  double female_value = 0.0;
  std::optional<double> diff_pct;
  double p_value = 1.0;
};

struct FairnessReport {
  static constexpr double kAlpha = 0.05;

  std::vector<MeasurementResult> results;
  std::size_t sample_size = 0;
  bool pass = true;

  [[nodiscard]] double min_p() const;
  [[nodiscard]] const MeasurementResult& at(Measurement m) const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Fixed-width table: Measurement(16) Male(12) Female(12) Diff.(10) p(12).
  [[nodiscard]] std::string to_text() const;
};

FairnessReport fairness_report(const ResponseMeasures& male, const ResponseMeasures& female);
FairnessReport fairness_report(const std::vector<Utterance>& male_responses,
                               const std::vector<Utterance>& female_responses, const Classifiers& cls,
                               const AttributeLexicons& lex);

/// Corpus BLEU up to order n (1..3) as a percentage, with brevity penalty;
/// zero match counts of order >= 2 are replaced by 1.
double bleu_n(const std::vector<Utterance>& hypotheses, const std::vector<Utterance>& references, int n);
/// Unique n-grams over total n-grams across all responses, as a percentage.
double distinct_n(const std::vector<Utterance>& responses, int n);

struct QualityReport {
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  double distinct1 = 0.0;
  double distinct2 = 0.0;

  [[nodiscard]] nlohmann::json to_json() const;
  [[nodiscard]] std::string to_text() const;
};

QualityReport quality_report(const std::vector<Utterance>& hypotheses, const std::vector<Utterance>& references);

}  // namespace dchat
