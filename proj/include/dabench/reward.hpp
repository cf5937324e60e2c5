#pragma once

// Reward-signal data generators and heuristic scorers: answer preference
// pairs, repetition penalty, per-step contribution, API usage correlation
// and degenerate-output detection.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dabench/core.hpp"
#include "dabench/evaluation.hpp"
#include "dabench/llm.hpp"
#include "dabench/similarity.hpp"

namespace dabench::reward {

class NoAnswer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TooFewSteps : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PairSource { Judge, ContributionRanking };
std::string_view to_string(PairSource s);
PairSource pair_source_from_string(std::string_view s);

struct PreferencePair {
  std::string task_id;
  std::string better;
  std::string worse;
  PairSource source = PairSource::Judge;
  int better_index = 0;  // bullet position or turn index
  int worse_index = 0;
  std::string judge;  // backend name for judge pairs
  bool operator==(const PreferencePair&) const = default;
};

using ApiCounts = std::map<std::string, int>;

struct StepScore {
  int turn_index = 1;
  double sim_to_answer = 0;  // in [-1, 1]; -1 for failed turns
  ApiCounts apis;
};

// Normalized edit distance between the reply's answer and each bullet;
// returns 0 or 1 for the closer bullet, nullopt when neither is within
// max_distance or both are equally close.
std::optional<int> match_repeated_bullet(std::string_view reply, std::string_view bullet_1,
                                         std::string_view bullet_2, double max_distance = 0.5);

// Judges up to max_pairs bullet pairs (all pairs when fewer exist; a
// seeded sample otherwise). Presentation order within a pair is randomized
// with the same seed. Unmatched replies are skipped.
std::vector<PreferencePair> collect_answer_preferences(const eval::JudgeContext& ctx,
                                                       const std::vector<std::string>& bullets, llm::Backend& judge,
                                                       std::size_t max_pairs = 20, std::uint64_t seed = 0,
                                                       const llm::GenerationParams& params = {});

// Mean similarity over distinct bullet pairs; 0 for fewer than two bullets.
double repetition_penalty(const std::vector<std::string>& bullets, sim::Embedder& embedder);

// One score per turn: similarity of the rendered answer to the turn's
// stdout, or -1 when the turn failed. Throws NoAnswer.
std::vector<StepScore> contribution_scores(const Trajectory& trajectory, sim::Embedder& embedder,
                                           const std::optional<Analysis>& answer = std::nullopt);

// (i better than j) for every pair whose scores differ by more than
// margin. Pair texts are the turns' code when the trajectory is given.
std::vector<PreferencePair> contribution_pairs(const std::vector<StepScore>& scores, double margin = 0.05,
                                               const Trajectory* trajectory = nullptr);

// Identifiers directly before '(' outside strings and comments; attribute
// calls count by their last segment. Keywords and def/class names are
// not calls. Never throws.
ApiCounts extract_api_calls(std::string_view code);

// Point-biserial correlation between API presence and step score, per
// API. APIs present in every step or in none are omitted. Throws
// TooFewSteps for fewer than two steps.
std::map<std::string, double> api_contribution_correlation(const std::vector<StepScore>& scores);

// Two-column "API | Corr" table, correlations x100, highest first.
std::string format_correlation_report(const std::map<std::string, double>& corr, std::size_t top_n = 10);

struct DegenerateConfig {
  double max_print_only_fraction = 0.8;
  int max_repeated_ngram = 3;  // occurrences of the most frequent 4-gram
  double max_repetition = 0.7;
};

struct DegenerateReport {
  bool flagged = false;
  std::vector<std::string> reasons;  // "print-only-code", "repeated-ngrams", "repetitive-bullets"
  double print_only_fraction = 0;
  int max_ngram_count = 0;
  double repetition = 0;
};

DegenerateReport detect_degenerate_pattern(const std::vector<std::string>& code_snippets,
                                           const std::vector<std::string>& bullets, sim::Embedder& embedder,
                                           const DegenerateConfig& config = {});
DegenerateReport detect_degenerate_pattern(const Trajectory& trajectory, sim::Embedder& embedder,
                                           const DegenerateConfig& config = {});

}  // namespace dabench::reward
