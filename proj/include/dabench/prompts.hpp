#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dabench::llm {

enum class TemplateId {
  QueryGeneration,
  HelpfulnessPreference,
  HelpfulnessEval,
  AgentTurn,
  AgentTerminate,
  AgentFinalize,
  SelfCorrect,
};

std::string_view to_string(TemplateId id);
TemplateId template_id_from_string(std::string_view s);

// Raw template text; placeholders are written {{name}}.
std::string_view template_text(TemplateId id);

class MissingBinding : public std::runtime_error {
 public:
  explicit MissingBinding(std::string placeholder);
  const std::string& placeholder() const { return placeholder_; }

 private:
  std::string placeholder_;
};

using Bindings = std::map<std::string, std::string, std::less<>>;

// Single-pass substitution: bound values are inserted verbatim and never
// re-scanned for placeholders. Extra bindings are ignored.
std::string render_prompt(TemplateId id, const Bindings& bindings);
std::string render_template(std::string_view text, const Bindings& bindings);

}  // namespace dabench::llm
