#pragma once

// Helpfulness judging, winning rates, BLEU, entailment and agreement
// statistics.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dabench/core.hpp"
#include "dabench/llm.hpp"

namespace dabench::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class LengthMismatch : public EvalError {
 public:
  using EvalError::EvalError;
};
class DegenerateInput : public EvalError {
 public:
  using EvalError::EvalError;
};
class EmptyInput : public EvalError {
 public:
  using EvalError::EvalError;
};
class NoRatings : public EvalError {
 public:
  using EvalError::EvalError;
};
class MissingReference : public EvalError {
 public:
  explicit MissingReference(std::string task_id);
  const std::string& task_id() const { return task_id_; }

 private:
  std::string task_id_;
};

// The stakeholder context a judge sees.
struct JudgeContext {
  std::string task_id;
  std::string database_title;
  std::string role;
  std::string intention;
};

JudgeContext judge_context(const AnalysisTask& task);

struct Report {
  std::string id;  // answer id
  Analysis analysis;
};

// "Report-1"/"Report-2" from a judge reply, or 0 when absent.
int parse_judge_answer(std::string_view reply);

// Even order_seed shows a as Report-1, odd shows b first. choice Left
// means a was preferred. A reply without an answer is retried once, then
// recorded as a tie.
Judgment judge_pair(const JudgeContext& ctx, const Report& a, const Report& b, llm::Backend& judge,
                    std::int64_t order_seed, const llm::GenerationParams& params = {});

struct WinRateReport {
  std::vector<std::pair<std::string, double>> per_judge;  // judge name -> rate in [0,100]
  double aggregate = 0;                                  // mean of per_judge
  std::size_t n_comparisons = 0;                         // judgments issued
  std::size_t tie_count = 0;
  std::vector<Judgment> judgments;  // left = system, right = reference
};

// Every task is judged in both presentation orders by every judge. Per
// judgment: system preferred 1, reference preferred 0, tie 0.5. A judge's
// rate is 100 x the mean over its judgments. Throws MissingReference when
// a task lacks a system output or a reference.
WinRateReport winning_rate(const std::map<std::string, Report>& system_outputs,
                           const std::map<std::string, Report>& references, const std::vector<JudgeContext>& tasks,
                           const std::vector<std::shared_ptr<llm::Backend>>& judges, int workers = 1,
                           const llm::GenerationParams& params = {});

// Lowercase runs of ASCII alphanumerics.
std::vector<std::string> bleu_tokens(std::string_view s);

// Findings then suggestions joined by single spaces.
std::string analysis_text(const Analysis& a);

// Corpus-level 4-gram BLEU in [0,100] with brevity penalty. Orders above
// one with zero clipped matches use (0+1)/(total+1). Throws EmptyInput
// and LengthMismatch.
double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

// Probability that hypothesis is entailed by premise.
class NliScorer {
 public:
  virtual ~NliScorer() = default;
  virtual double entail_prob(std::string_view premise, std::string_view hypothesis) = 0;
};

// POST {endpoint} {"premise", "hypothesis"} -> {"entailment": p}
class RemoteNli final : public NliScorer {
 public:
  explicit RemoteNli(std::string endpoint, llm::RetryPolicy retry = {}, std::chrono::seconds timeout = std::chrono::seconds(60));
  double entail_prob(std::string_view premise, std::string_view hypothesis) override;

 private:
  std::string endpoint_;
  llm::RetryPolicy retry_;
  std::chrono::seconds timeout_;
};

// Mean over generated bullets of the max over annotation bullets of
// P(entail | premise = annotation bullet, hypothesis = generated bullet).
// 0 when either side has no bullets.
double entailment(const Analysis& generation, const Analysis& annotation, NliScorer& nli);

double pointwise_aggregate(const std::vector<BulletRating>& ratings);
double pointwise_aggregate(const std::vector<int>& ratings);

// p_e = 1 gives 1.0 when the lists agree everywhere, else 0.0.
double cohen_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b);
double raw_agreement(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Pearson correlation of average ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> average_ranks(const std::vector<double>& v);

struct EvalRow {
  std::string system;
  std::string split;
  double helpfulness = 0;
  std::optional<double> entailment;
  double bleu = 0;
};

// Help. / Entail. / BLEU per split, as text and as JSON.
std::string format_eval_table(const std::vector<EvalRow>& rows);
nlohmann::json eval_table_json(const std::vector<EvalRow>& rows);

}  // namespace dabench::eval
