#include "dabench/reward.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dabench/prompts.hpp"
#include "dabench/text.hpp"

namespace dabench::reward {

std::string_view to_string(PairSource s) { return s == PairSource::Judge ? "judge" : "contribution-ranking"; }

PairSource pair_source_from_string(std::string_view s) {
  if (s == "judge") return PairSource::Judge;
  if (s == "contribution-ranking") return PairSource::ContributionRanking;
  throw std::invalid_argument(fmt::format("unknown pair source: {}", s));
}

namespace {

std::vector<std::string> all_bullets(const Analysis& a) {
  std::vector<std::string> v = a.findings;
  v.insert(v.end(), a.suggestions.begin(), a.suggestions.end());
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Answer preferences

std::optional<int> match_repeated_bullet(std::string_view reply, std::string_view bullet_1,
                                         std::string_view bullet_2, double max_distance) {
  static const std::regex answer(R"(answer\s*:\s*([^\n]*))", std::regex::icase);
  std::string s(reply);
  std::smatch m;
  if (!std::regex_search(s, m, answer)) return std::nullopt;
  auto said = text::normalize_for_compare(normalize_bullet(m.str(1)));
  while (!said.empty() && (said.front() == '"' || said.front() == '*')) said.erase(said.begin());
  while (!said.empty() && (said.back() == '"' || said.back() == '*')) said.pop_back();
  double d1 = text::normalized_edit_distance(said, text::normalize_for_compare(bullet_1));
  double d2 = text::normalized_edit_distance(said, text::normalize_for_compare(bullet_2));
  if (d1 == d2 || std::min(d1, d2) > max_distance) return std::nullopt;
  return d1 < d2 ? 0 : 1;
}

std::vector<PreferencePair> collect_answer_preferences(const eval::JudgeContext& ctx,
                                                       const std::vector<std::string>& bullets, llm::Backend& judge,
                                                       std::size_t max_pairs, std::uint64_t seed,
                                                       const llm::GenerationParams& params) {
  if (bullets.size() < 2) throw std::invalid_argument("preference collection needs at least two bullets");
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i < bullets.size(); ++i)
    for (std::size_t j = i + 1; j < bullets.size(); ++j) pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
  std::mt19937_64 rng(seed);
  if (pairs.size() > max_pairs) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(max_pairs);
    std::sort(pairs.begin(), pairs.end());
  }
  std::vector<PreferencePair> out;
  for (auto [i, j] : pairs) {
    if (rng() % 2) std::swap(i, j);
    llm::Conversation convo;
    convo.add(llm::Role::User, llm::render_prompt(llm::TemplateId::HelpfulnessPreference,
                                                  {{"database title", ctx.database_title},
                                                   {"stakeholder role", ctx.role},
                                                   {"describe intention", ctx.intention},
                                                   {"answer bullet point 1", bullets[i]},
                                                   {"answer bullet point 2", bullets[j]}}));
    auto pick = match_repeated_bullet(judge.complete(convo, params), bullets[i], bullets[j]);
    if (!pick) {
      spdlog::debug("task {}: preference reply matched neither bullet {} nor {}", ctx.task_id, i, j);
      continue;
    }
    int better = *pick == 0 ? i : j, worse = *pick == 0 ? j : i;
    out.push_back({ctx.task_id, bullets[better], bullets[worse], PairSource::Judge, better, worse, judge.name()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity-based scores

double repetition_penalty(const std::vector<std::string>& bullets, sim::Embedder& embedder) {
  if (bullets.size() < 2) return 0.0;
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < bullets.size(); ++i) {
    for (std::size_t j = i + 1; j < bullets.size(); ++j) {
      sum += embedder.similarity(bullets[i], bullets[j]);
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

std::vector<StepScore> contribution_scores(const Trajectory& trajectory, sim::Embedder& embedder,
                                           const std::optional<Analysis>& answer) {
  const auto& y = answer ? answer : trajectory.final_answer;
  if (!y) throw NoAnswer(fmt::format("trajectory {} has no final answer", trajectory.task_id));
  auto rendered = render_analysis(*y);
  std::vector<StepScore> out;
  for (const auto& t : trajectory.turns) {
    StepScore s;
    s.turn_index = t.index;
    s.sim_to_answer = t.observation.ok ? embedder.similarity(rendered, t.observation.stdout_text) : -1.0;
    s.apis = extract_api_calls(t.action_code);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PreferencePair> contribution_pairs(const std::vector<StepScore>& scores, double margin,
                                               const Trajectory* trajectory) {
  auto code_of = [&](int turn_index) -> std::string {
    if (!trajectory) return fmt::format("turn {}", turn_index);
    for (const auto& t : trajectory->turns)
      if (t.index == turn_index) return t.action_code;
    return {};
  };
  std::vector<PreferencePair> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = i + 1; j < scores.size(); ++j) {
      double d = scores[i].sim_to_answer - scores[j].sim_to_answer;
      if (std::abs(d) <= margin) continue;
      const auto& hi = d > 0 ? scores[i] : scores[j];
      const auto& lo = d > 0 ? scores[j] : scores[i];
      PreferencePair p;
      p.task_id = trajectory ? trajectory->task_id : std::string{};
      p.better = code_of(hi.turn_index);
      p.worse = code_of(lo.turn_index);
      p.source = PairSource::ContributionRanking;
      p.better_index = hi.turn_index;
      p.worse_index = lo.turn_index;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// API extraction

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

const std::set<std::string, std::less<>>& keywords() {
  static const std::set<std::string, std::less<>> k = {
      "and", "as", "assert", "async", "await", "del", "elif", "else", "except", "for", "from", "if", "import",
      "in", "is", "lambda", "not", "or", "pass", "raise", "return", "while", "with", "yield", "def", "class"};
  return k;
}

struct Tok {
  enum Kind { Ident, Open, Other } kind;
  std::string text;
};

// Strings (with optional prefixes, triple quotes and escapes) and
// comments produce no tokens.
std::vector<Tok> lex(std::string_view s) {
  std::vector<Tok> out;
  std::size_t i = 0, n = s.size();
  auto skip_string = [&](std::size_t q) {
    char quote = s[q];
    bool triple = q + 2 < n && s[q + 1] == quote && s[q + 2] == quote;
    std::size_t k = q + (triple ? 3 : 1);
    while (k < n) {
      if (s[k] == '\\') {
        k += 2;
        continue;
      }
      if (triple) {
        if (k + 2 < n && s[k] == quote && s[k + 1] == quote && s[k + 2] == quote) return k + 3;
      } else if (s[k] == quote) {
        return k + 1;
      } else if (s[k] == '\n') {
        return k + 1;  // unterminated single-line string ends at the newline
      }
      ++k;
    }
    return n;
  };
  while (i < n) {
    char c = s[i];
    if (c == '#') {
      while (i < n && s[i] != '\n') ++i;
    } else if (c == '\'' || c == '"') {
      i = skip_string(i);
    } else if (ident_start(c)) {
      std::size_t j = i;
      while (j < n && ident_char(s[j])) ++j;
      std::string word(s.substr(i, j - i));
      std::string lower = text::to_lower(word);
      bool prefix = word.size() <= 2 && j < n && (s[j] == '\'' || s[j] == '"') &&
                    lower.find_first_not_of("rbfu") == std::string::npos;
      if (prefix) {
        i = skip_string(j);
      } else {
        out.push_back({Tok::Ident, std::move(word)});
        i = j;
      }
    } else if (c == '(') {
      out.push_back({Tok::Open, "("});
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c)) && c != '\n') {
      ++i;
    } else {
      out.push_back({Tok::Other, std::string(1, c)});
      ++i;
    }
  }
  return out;
}

}  // namespace

ApiCounts extract_api_calls(std::string_view code) {
  ApiCounts out;
  auto toks = lex(code);
  for (std::size_t k = 0; k + 1 < toks.size(); ++k) {
    if (toks[k].kind != Tok::Ident || toks[k + 1].kind != Tok::Open) continue;
    if (keywords().count(toks[k].text)) continue;
    if (k > 0 && toks[k - 1].kind == Tok::Ident && (toks[k - 1].text == "def" || toks[k - 1].text == "class")) continue;
    ++out[toks[k].text];
  }
  return out;
}

std::map<std::string, double> api_contribution_correlation(const std::vector<StepScore>& scores) {
  if (scores.size() < 2) throw TooFewSteps(fmt::format("{} steps; correlation needs at least two", scores.size()));
  std::set<std::string> apis;
  for (const auto& s : scores)
    for (const auto& [name, count] : s.apis) apis.insert(name);
  std::vector<double> y;
  for (const auto& s : scores) y.push_back(s.sim_to_answer);
  std::map<std::string, double> out;
  for (const auto& api : apis) {
    std::vector<double> x;
    for (const auto& s : scores) x.push_back(s.apis.count(api) ? 1.0 : 0.0);
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    try {
      out[api] = eval::pearson(x, y);
    } catch (const eval::DegenerateInput&) {
      // constant scores: no correlation is defined for any API
      return {};
    }
  }
  return out;
}

std::string format_correlation_report(const std::map<std::string, double>& corr, std::size_t top_n) {
  std::vector<std::pair<std::string, double>> rows(corr.begin(), corr.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (rows.size() > top_n) rows.resize(top_n);
  std::string out = fmt::format("{:<20} {:>8}\n", "API", "Corr");
  for (const auto& [api, c] : rows) out += fmt::format("{:<20} {:>8.2f}\n", api, 100.0 * c);
  return out;
}

// ---------------------------------------------------------------------------
// Degenerate patterns

DegenerateReport detect_degenerate_pattern(const std::vector<std::string>& code_snippets,
                                           const std::vector<std::string>& bullets, sim::Embedder& embedder,
                                           const DegenerateConfig& config) {
  static const std::regex print_only(R"(^print\s*\(.*\)\s*;?$)");
  DegenerateReport r;
  std::size_t lines = 0, prints = 0;
  for (const auto& code : code_snippets) {
    for (const auto& raw : text::split_lines(code)) {
      std::string line(text::trim(raw));
      if (line.empty() || line.front() == '#') continue;
      ++lines;
      prints += std::regex_match(line, print_only);
    }
  }
  r.print_only_fraction = lines ? static_cast<double>(prints) / static_cast<double>(lines) : 0.0;

  std::map<std::vector<std::string>, int> grams;
  for (const auto& b : bullets) {
    auto toks = text::word_tokens(b);
    for (std::size_t i = 0; i + 4 <= toks.size(); ++i) {
      r.max_ngram_count = std::max(r.max_ngram_count, ++grams[{toks.begin() + i, toks.begin() + i + 4}]);
    }
  }
  r.repetition = repetition_penalty(bullets, embedder);

  if (r.print_only_fraction > config.max_print_only_fraction) r.reasons.push_back("print-only-code");
  if (r.max_ngram_count > config.max_repeated_ngram) r.reasons.push_back("repeated-ngrams");
  if (r.repetition > config.max_repetition) r.reasons.push_back("repetitive-bullets");
  r.flagged = !r.reasons.empty();
  return r;
}

DegenerateReport detect_degenerate_pattern(const Trajectory& trajectory, sim::Embedder& embedder,
                                           const DegenerateConfig& config) {
  std::vector<std::string> code;
  for (const auto& t : trajectory.turns) code.push_back(t.action_code);
  return detect_degenerate_pattern(code, trajectory.final_answer ? all_bullets(*trajectory.final_answer)
                                                                 : std::vector<std::string>{},
                                   embedder, config);
}

}  // namespace dabench::reward
