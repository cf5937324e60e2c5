#pragma once

// The multi-turn analysis loop: propose code, execute it, feed the
// observation back, ask whether to stop, then ask for findings and
// suggestions.
//
// History sent to the backend is the agent_turn prompt followed by one
// assistant message (the executed code, fenced) and one user message (the
// formatted observation) per stored turn, so it can be rebuilt from a
// Trajectory alone. Termination, finalize and self-correction prompts are
// appended to copies and never enter the history.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dabench/core.hpp"
#include "dabench/execution.hpp"
#include "dabench/llm.hpp"

namespace dabench::agent {

struct AgentConfig {
  int max_turns = 9;
  int max_resamples_per_turn = 5;  // fresh samples per turn, all discarded when the turn fails
  bool self_correction = false;
  int max_corrections_per_turn = 2;
  int max_corrections_per_session = 4;
  std::size_t observation_cap_chars = 4096;  // code points
  llm::GenerationParams params;

  std::vector<std::string> violations() const;
};

class NoCode : public std::runtime_error {
 public:
  NoCode() : std::runtime_error("reply contains no code") {}
};

// The sandbox died and could not be brought back.
class SessionFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// First fenced block's body; otherwise the whole message when some line
// ends in ')' or contains '='. Throws NoCode.
std::string extract_code(std::string_view message);

// First standalone yes/no wins; without one, "sufficient" counts as yes
// unless negated. Anything else means keep analyzing.
bool parse_termination_reply(std::string_view reply);

bool decide_termination(llm::Backend& backend, const llm::Conversation& history,
                        const llm::GenerationParams& params = {});

struct CorrectionBudget {
  int max_per_turn = 2;
  int max_per_session = 4;
  int used_this_turn = 0;
  int used_this_session = 0;
  bool exhausted() const { return used_this_turn >= max_per_turn || used_this_session >= max_per_session; }
};

// Asks the backend to repair failed_code. Returns nullopt (give up) when
// the budget is exhausted, without calling the backend; otherwise charges
// one correction and returns the repaired code. Throws NoCode when the
// reply carries none (the correction is still charged).
std::optional<std::string> self_correct(llm::Backend& backend, const llm::Conversation& history,
                                        std::string_view failed_code, std::string_view error_text,
                                        CorrectionBudget& budget, const llm::GenerationParams& params = {});

std::string fence_code(std::string_view code);

// Applies the conversation cap; the result is what gets stored on the Turn.
Observation cap_observation(Observation obs, std::size_t cap_chars);

// User message text for an observation already passed through cap_observation.
std::string format_observation(const Observation& obs);

std::string initial_prompt(const AnalysisTask& task, const std::vector<std::string>& variables);

llm::Conversation replay_history(const AnalysisTask& task, const Trajectory& trajectory,
                                 const std::vector<std::string>& variables);

// Throws SessionFailure and propagates llm::BackendUnavailable.
Trajectory run_analysis(const AnalysisTask& task, llm::Backend& backend, exec::CodeExecutor& executor,
                        const AgentConfig& config);

}  // namespace dabench::agent
