#include "dabench/agent.hpp"

#include <regex>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dabench/ingestion.hpp"
#include "dabench/prompts.hpp"
#include "dabench/text.hpp"

namespace dabench::agent {

std::vector<std::string> AgentConfig::violations() const {
  std::vector<std::string> out;
  if (max_turns < 1) out.push_back(fmt::format("max_turns must be >= 1, got {}", max_turns));
  if (max_resamples_per_turn < 1) {
    out.push_back(fmt::format("max_resamples_per_turn must be >= 1, got {}", max_resamples_per_turn));
  }
  if (max_corrections_per_turn < 0) {
    out.push_back(fmt::format("max_corrections_per_turn must be >= 0, got {}", max_corrections_per_turn));
  }
  if (max_corrections_per_session < 0) {
    out.push_back(fmt::format("max_corrections_per_session must be >= 0, got {}", max_corrections_per_session));
  }
  if (observation_cap_chars == 0) out.push_back("observation_cap_chars must be > 0");
  return out;
}

std::string extract_code(std::string_view message) {
  // An opening fence is ``` at line start plus an optional info string.
  auto lines = text::split_lines(message);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!text::trim(lines[i]).starts_with("```")) continue;
    std::vector<std::string> body;
    for (std::size_t j = i + 1; j < lines.size(); ++j) {
      if (text::trim(lines[j]).starts_with("```")) {
        auto code = text::join(body, "\n");
        if (text::trim(code).empty()) break;
        return code;
      }
      body.push_back(lines[j]);
    }
    break;  // unterminated or empty fence: fall back to the heuristic
  }
  bool code_like = false;
  for (const auto& line : lines) {
    auto t = text::trim(line);
    if (t.starts_with("```")) continue;
    if (t.ends_with(")") || t.find('=') != std::string_view::npos) code_like = true;
  }
  if (!code_like) throw NoCode();
  std::vector<std::string> kept;
  for (const auto& line : lines) {
    if (!text::trim(line).starts_with("```")) kept.push_back(line);
  }
  return std::string(text::trim(text::join(kept, "\n")));
}

bool parse_termination_reply(std::string_view reply) {
  static const std::regex yes_no(R"(\b(yes|no)\b)", std::regex::icase);
  static const std::regex negated(R"(\bnot\s+(yet\s+)?sufficient)", std::regex::icase);
  static const std::regex sufficient(R"(\bsufficient)", std::regex::icase);
  std::string s(reply);
  std::smatch m;
  if (std::regex_search(s, m, yes_no)) return text::iequals(m.str(1), "yes");
  if (std::regex_search(s, negated)) return false;
  return std::regex_search(s, sufficient);
}

bool decide_termination(llm::Backend& backend, const llm::Conversation& history,
                        const llm::GenerationParams& params) {
  auto convo = history.with(llm::Role::User, llm::render_prompt(llm::TemplateId::AgentTerminate, {}));
  return parse_termination_reply(backend.complete(convo, params));
}

std::string fence_code(std::string_view code) { return fmt::format("```python\n{}\n```", code); }

std::optional<std::string> self_correct(llm::Backend& backend, const llm::Conversation& history,
                                        std::string_view failed_code, std::string_view error_text,
                                        CorrectionBudget& budget, const llm::GenerationParams& params) {
  if (budget.exhausted()) return std::nullopt;
  ++budget.used_this_turn;
  ++budget.used_this_session;
  auto convo = history.with(llm::Role::Assistant, fence_code(failed_code))
                   .with(llm::Role::User,
                         llm::render_prompt(llm::TemplateId::SelfCorrect, {{"error", std::string(error_text)}}));
  return extract_code(backend.complete(convo, params));
}

Observation cap_observation(Observation obs, std::size_t cap_chars) {
  for (auto* s : {&obs.stdout_text, &obs.stderr_text}) {
    if (text::utf8_length(*s) > cap_chars) {
      *s = text::utf8_prefix(*s, cap_chars);
      obs.truncated = true;
    }
  }
  return obs;
}

std::string format_observation(const Observation& obs) {
  std::string out = "Execution output:\n```\n";
  out += obs.stdout_text.empty() ? "(no output)" : obs.stdout_text;
  if (!out.ends_with('\n')) out += '\n';
  out += "```";
  if (!obs.stderr_text.empty()) {
    out += obs.ok ? "\nWarnings:\n```\n" : "\nError:\n```\n";
    out += obs.stderr_text;
    if (!out.ends_with('\n')) out += '\n';
    out += "```";
  }
  if (obs.truncated) out += "\n(output truncated)";
  if (exec::lost_namespace(obs)) {
    out += "\nThe interpreter was restarted: variables from earlier steps are gone, the tables are loaded again.";
  }
  return out;
}

std::string initial_prompt(const AnalysisTask& task, const std::vector<std::string>& variables) {
  if (task.database == nullptr) throw std::invalid_argument("task " + task.id + " has no database");
  std::vector<std::string> vars = variables;
  if (vars.empty()) {
    for (const auto& t : task.database->tables) vars.push_back(t.name);
  }
  return llm::render_prompt(llm::TemplateId::AgentTurn,
                            {{"database title", task.database->title},
                             {"stakeholder role", task.query.role},
                             {"describe intention", task.query.intention},
                             {"database schema", ingest::linearize_schema(*task.database)},
                             {"table variables", text::join(vars, ", ")}});
}

namespace {

void append_turn(llm::Conversation& history, const Turn& turn) {
  history.add(llm::Role::Assistant, fence_code(turn.action_code));
  history.add(llm::Role::User, format_observation(turn.observation));
}

Observation no_code_observation() {
  Observation obs;
  obs.ok = false;
  obs.stderr_text = "reply contains no code";
  return obs;
}

class Loop {
 public:
  Loop(const AnalysisTask& task, llm::Backend& backend, exec::CodeExecutor& executor, const AgentConfig& config)
      : task_(task), backend_(backend), executor_(executor), config_(config) {
    budget_.max_per_turn = config.max_corrections_per_turn;
    budget_.max_per_session = config.max_corrections_per_session;
  }

  Trajectory run() {
    Trajectory traj;
    traj.task_id = task_.id;
    history_.add(llm::Role::User, initial_prompt(task_, executor_.variables()));
    traj.termination = Termination::TurnCap;
    for (int i = 1; i <= config_.max_turns; ++i) {
      bool ok = run_turn(i, traj);
      if (!ok) {
        traj.termination = Termination::UnrecoverableError;
        break;
      }
      if (decide_termination(backend_, history_, next_params())) {
        traj.termination = Termination::ModelDecided;
        break;
      }
    }
    finalize(traj);
    return traj;
  }

 private:
  // Every backend call gets its own seed so resamples differ under a seeded sampler.
  llm::GenerationParams next_params() {
    auto p = config_.params;
    if (p.seed) *p.seed += calls_;
    ++calls_;
    return p;
  }

  Observation execute(const std::string& code) {
    try {
      return cap_observation(executor_.exec_step(code), config_.observation_cap_chars);
    } catch (const exec::SessionDead& e) {
      throw SessionFailure(fmt::format("task {}: {}", task_.id, e.what()));
    }
  }

  // Returns whether the turn succeeded. The turn is recorded either way.
  bool run_turn(int index, Trajectory& traj) {
    budget_.used_this_turn = 0;
    Turn turn;
    turn.index = index;
    bool have_code = false;
    bool ok = false;
    for (int sample = 0; sample < config_.max_resamples_per_turn && !ok; ++sample) {
      std::string code;
      try {
        code = extract_code(backend_.complete(history_, next_params()));
      } catch (const NoCode&) {
        ++turn.resample_count;
        if (!have_code) turn.observation = no_code_observation();
        continue;
      }
      auto obs = execute(code);
      if (!obs.ok && config_.self_correction) correct(code, obs);
      turn.action_code = std::move(code);
      turn.observation = std::move(obs);
      have_code = true;
      if (turn.observation.ok) {
        ok = true;
      } else {
        ++turn.resample_count;
      }
    }
    turn.corrections_used = budget_.used_this_turn;
    if (!ok) {
      spdlog::warn("task {}: turn {} failed after {} samples", task_.id, index, turn.resample_count);
    }
    append_turn(history_, turn);
    traj.turns.push_back(std::move(turn));
    return ok;
  }

  // Replaces code and obs with the corrected attempt while the budget lasts.
  void correct(std::string& code, Observation& obs) {
    while (!obs.ok) {
      std::optional<std::string> fixed;
      try {
        fixed = self_correct(backend_, history_, code, obs.stderr_text, budget_, next_params());
      } catch (const NoCode&) {
        continue;  // charged; the failed code stays current
      }
      if (!fixed) return;
      code = std::move(*fixed);
      obs = execute(code);
    }
  }

  void finalize(Trajectory& traj) {
    auto convo = history_.with(llm::Role::User, llm::render_prompt(llm::TemplateId::AgentFinalize, {}));
    for (int attempt = 0; attempt < 2 && !traj.final_answer; ++attempt) {
      try {
        traj.final_answer = parse_analysis(backend_.complete(convo, next_params()));
      } catch (const MissingSections& e) {
        traj.answer_absent_reason = fmt::format("finalize reply unparseable: {}", e.what());
      }
    }
    if (traj.final_answer) {
      traj.answer_absent_reason.clear();
    } else if (traj.termination == Termination::ModelDecided) {
      traj.termination = Termination::UnrecoverableError;
    }
  }

  const AnalysisTask& task_;
  llm::Backend& backend_;
  exec::CodeExecutor& executor_;
  const AgentConfig& config_;
  llm::Conversation history_;
  CorrectionBudget budget_;
  std::int64_t calls_ = 0;
};

}  // namespace

llm::Conversation replay_history(const AnalysisTask& task, const Trajectory& trajectory,
                                 const std::vector<std::string>& variables) {
  llm::Conversation history;
  history.add(llm::Role::User, initial_prompt(task, variables));
  for (const auto& t : trajectory.turns) append_turn(history, t);
  return history;
}

Trajectory run_analysis(const AnalysisTask& task, llm::Backend& backend, exec::CodeExecutor& executor,
                        const AgentConfig& config) {
  auto bad = config.violations();
  if (!bad.empty()) throw std::invalid_argument("invalid agent config: " + text::join(bad, "; "));
  return Loop(task, backend, executor, config).run();
}

}  // namespace dabench::agent
