#include "dabench/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dabench/parallel.hpp"
#include "dabench/prompts.hpp"
#include "dabench/text.hpp"

namespace dabench::eval {

MissingReference::MissingReference(std::string task_id)
    : EvalError(fmt::format("task {} has no matching system output or reference", task_id)),
      task_id_(std::move(task_id)) {}

JudgeContext judge_context(const AnalysisTask& task) {
  JudgeContext c;
  c.task_id = task.id;
  if (task.database) c.database_title = task.database->title;
  c.role = task.query.role;
  c.intention = task.query.intention;
  return c;
}

// ---------------------------------------------------------------------------
// Pairwise judging

int parse_judge_answer(std::string_view reply) {
  static const std::regex re(R"(answer\s*:\s*\**\s*report[-\s]?([12]))", std::regex::icase);
  std::string s(reply);
  std::smatch m;
  if (!std::regex_search(s, m, re)) return 0;
  return m.str(1) == "1" ? 1 : 2;
}

namespace {

std::string parse_reasoning(std::string_view reply) {
  static const std::regex re(R"(reasoning\s*:\s*([^\n]*))", std::regex::icase);
  std::string s(reply);
  std::smatch m;
  return std::regex_search(s, m, re) ? std::string(text::trim(m.str(1))) : std::string{};
}

}  // namespace

Judgment judge_pair(const JudgeContext& ctx, const Report& a, const Report& b, llm::Backend& judge,
                    std::int64_t order_seed, const llm::GenerationParams& params) {
  bool a_first = order_seed % 2 == 0;
  const Report& first = a_first ? a : b;
  const Report& second = a_first ? b : a;
  llm::Conversation convo;
  convo.add(llm::Role::User, llm::render_prompt(llm::TemplateId::HelpfulnessEval,
                                                {{"database title", ctx.database_title},
                                                 {"stakeholder role", ctx.role},
                                                 {"describe intention", ctx.intention},
                                                 {"report 1", render_analysis(first.analysis)},
                                                 {"report 2", render_analysis(second.analysis)}}));
  Judgment j;
  j.task_id = ctx.task_id;
  j.left_id = a.id;
  j.right_id = b.id;
  j.judge = judge.name();
  j.order_seed = order_seed;
  for (int attempt = 0; attempt < 2; ++attempt) {
    auto reply = judge.complete(convo, params);
    int shown = parse_judge_answer(reply);
    if (shown == 0) continue;
    bool picked_a = (shown == 1) == a_first;
    j.choice = picked_a ? Choice::Left : Choice::Right;
    j.rationale = parse_reasoning(reply);
    return j;
  }
  spdlog::warn("judge {} gave no answer for task {} twice; recording a tie", judge.name(), ctx.task_id);
  j.choice = Choice::Tie;
  return j;
}

WinRateReport winning_rate(const std::map<std::string, Report>& system_outputs,
                           const std::map<std::string, Report>& references, const std::vector<JudgeContext>& tasks,
                           const std::vector<std::shared_ptr<llm::Backend>>& judges, int workers,
                           const llm::GenerationParams& params) {
  if (judges.empty()) throw EmptyInput("no judges configured");
  if (tasks.empty()) throw EmptyInput("no tasks to evaluate");
  for (const auto& t : tasks) {
    if (!system_outputs.count(t.task_id) || !references.count(t.task_id)) throw MissingReference(t.task_id);
  }
  // Job k: task k / (2J), judge (k / 2) % J, order k % 2.
  std::size_t per_task = 2 * judges.size();
  std::vector<Judgment> out(tasks.size() * per_task);
  parallel_for(out.size(), workers, [&](std::size_t k) {
    const auto& ctx = tasks[k / per_task];
    auto& judge = *judges[(k / 2) % judges.size()];
    out[k] = judge_pair(ctx, system_outputs.at(ctx.task_id), references.at(ctx.task_id), judge,
                        static_cast<std::int64_t>(k % 2), params);
  });
  WinRateReport r;
  r.n_comparisons = out.size();
  for (std::size_t ji = 0; ji < judges.size(); ++ji) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < out.size(); ++k) {
      if ((k / 2) % judges.size() != ji) continue;
      sum += out[k].choice == Choice::Left ? 1.0 : out[k].choice == Choice::Tie ? 0.5 : 0.0;
      ++n;
    }
    r.per_judge.emplace_back(judges[ji]->name(), 100.0 * sum / static_cast<double>(n));
  }
  for (const auto& j : out) r.tie_count += j.choice == Choice::Tie;
  double total = 0;
  for (const auto& [name, rate] : r.per_judge) total += rate;
  r.aggregate = total / static_cast<double>(r.per_judge.size());
  r.judgments = std::move(out);
  return r;
}

// ---------------------------------------------------------------------------
// BLEU

std::vector<std::string> bleu_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string analysis_text(const Analysis& a) {
  std::vector<std::string> parts = a.findings;
  parts.insert(parts.end(), a.suggestions.begin(), a.suggestions.end());
  return text::join(parts, " ");
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  constexpr std::size_t kMaxOrder = 4;
  if (candidates.empty()) throw EmptyInput("bleu needs at least one candidate");
  if (candidates.size() != references.size()) {
    throw LengthMismatch(fmt::format("{} candidates vs {} references", candidates.size(), references.size()));
  }
  std::size_t matches[kMaxOrder] = {}, totals[kMaxOrder] = {};
  std::size_t cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto c = bleu_tokens(candidates[i]);
    auto r = bleu_tokens(references[i]);
    cand_len += c.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      auto cn = ngrams(c, n);
      auto rn = ngrams(r, n);
      for (const auto& [g, count] : cn) {
        auto it = rn.find(g);
        if (it != rn.end()) matches[n - 1] += std::min(count, it->second);
      }
      if (c.size() >= n) totals[n - 1] += c.size() - n + 1;
    }
  }
  if (cand_len == 0 || matches[0] == 0) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    double p = matches[n] == 0 ? 1.0 / static_cast<double>(totals[n] + 1)
                               : static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    log_sum += std::log(p);
  }
  double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return 100.0 * bp * std::exp(log_sum / kMaxOrder);
}

// ---------------------------------------------------------------------------
// Entailment

RemoteNli::RemoteNli(std::string endpoint, llm::RetryPolicy retry, std::chrono::seconds timeout)
    : endpoint_(std::move(endpoint)), retry_(retry), timeout_(timeout) {}

double RemoteNli::entail_prob(std::string_view premise, std::string_view hypothesis) {
  nlohmann::json body = {{"premise", std::string(premise)}, {"hypothesis", std::string(hypothesis)}};
  auto res = llm::post_json_with_retry(endpoint_, {}, body.dump(), timeout_, retry_, nullptr);
  try {
    double p = nlohmann::json::parse(res.body).at("entailment").get<double>();
    if (!(p >= 0.0 && p <= 1.0)) throw llm::BadResponse(fmt::format("entailment probability {} outside [0,1]", p));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw llm::BadResponse(fmt::format("malformed NLI response: {}", e.what()));
  }
}

double entailment(const Analysis& generation, const Analysis& annotation, NliScorer& nli) {
  auto bullets = [](const Analysis& a) {
    std::vector<std::string> v = a.findings;
    v.insert(v.end(), a.suggestions.begin(), a.suggestions.end());
    return v;
  };
  auto gen = bullets(generation), ann = bullets(annotation);
  if (gen.empty() || ann.empty()) return 0.0;
  double sum = 0;
  for (const auto& h : gen) {
    double best = 0;
    for (const auto& p : ann) best = std::max(best, nli.entail_prob(p, h));
    sum += best;
  }
  return sum / static_cast<double>(gen.size());
}

// ---------------------------------------------------------------------------
// Ratings and agreement

double pointwise_aggregate(const std::vector<int>& ratings) {
  if (ratings.empty()) throw NoRatings("no ratings to aggregate");
  double sum = 0;
  for (int r : ratings) {
    if (r < 0 || r > 2) throw std::invalid_argument(fmt::format("rating {} outside 0..2", r));
    sum += r;
  }
  return sum / static_cast<double>(ratings.size());
}

double pointwise_aggregate(const std::vector<BulletRating>& ratings) {
  std::vector<int> values;
  for (const auto& r : ratings) values.push_back(static_cast<int>(r.rating));
  return pointwise_aggregate(values);
}

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw LengthMismatch(fmt::format("lists of length {} and {}", a, b));
}

}  // namespace

double raw_agreement(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  check_lengths(a.size(), b.size());
  if (a.empty()) throw DegenerateInput("no labels");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double cohen_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  double p_o = raw_agreement(a, b);
  std::map<std::string, double> ma, mb;
  for (const auto& x : a) ma[x] += 1;
  for (const auto& x : b) mb[x] += 1;
  double n = static_cast<double>(a.size());
  double p_e = 0;
  for (const auto& [label, count] : ma) {
    auto it = mb.find(label);
    if (it != mb.end()) p_e += (count / n) * (it->second / n);
  }
  if (p_e >= 1.0) return p_o == 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  check_lengths(a.size(), b.size());
  if (a.size() < 2) throw DegenerateInput("correlation needs at least two points");
  double n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0 || vb == 0) throw DegenerateInput("correlation of a constant list");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  check_lengths(a.size(), b.size());
  return pearson(average_ranks(a), average_ranks(b));
}

// ---------------------------------------------------------------------------
// Reports

std::string format_eval_table(const std::vector<EvalRow>& rows) {
  std::string out = fmt::format("{:<24} {:<8} {:>7} {:>8} {:>7}\n", "System", "Split", "Help.", "Entail.", "BLEU");
  for (const auto& r : rows) {
    out += fmt::format("{:<24} {:<8} {:>7.2f} {:>8} {:>7.2f}\n", r.system, r.split, r.helpfulness,
                       r.entailment ? fmt::format("{:.2f}", *r.entailment) : std::string("-"), r.bleu);
  }
  return out;
}

nlohmann::json eval_table_json(const std::vector<EvalRow>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"system", r.system}, {"split", r.split}, {"helpfulness", r.helpfulness}, {"bleu", r.bleu}};
    j["entailment"] = r.entailment ? nlohmann::json(*r.entailment) : nlohmann::json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace dabench::eval
