#include "dabench/prompts.hpp"

#include <fmt/format.h>

#include "embedded_templates.inc"

namespace dabench::llm {

namespace {
constexpr std::pair<TemplateId, std::string_view> kIds[] = {
    {TemplateId::QueryGeneration, "query_generation"},
    {TemplateId::HelpfulnessPreference, "helpfulness_preference"},
    {TemplateId::HelpfulnessEval, "helpfulness_eval"},
    {TemplateId::AgentTurn, "agent_turn"},
    {TemplateId::AgentTerminate, "agent_terminate"},
    {TemplateId::AgentFinalize, "agent_finalize"},
    {TemplateId::SelfCorrect, "self_correct"},
};
}  // namespace

std::string_view to_string(TemplateId id) {
  for (const auto& [v, name] : kIds) {
    if (v == id) return name;
  }
  return "?";
}

TemplateId template_id_from_string(std::string_view s) {
  for (const auto& [v, name] : kIds) {
    if (name == s) return v;
  }
  throw std::invalid_argument(fmt::format("unknown template id: '{}'", s));
}

std::string_view template_text(TemplateId id) {
  switch (id) {
    case TemplateId::QueryGeneration: return templates::kQueryGeneration;
    case TemplateId::HelpfulnessPreference: return templates::kHelpfulnessPreference;
    case TemplateId::HelpfulnessEval: return templates::kHelpfulnessEval;
    case TemplateId::AgentTurn: return templates::kAgentTurn;
    case TemplateId::AgentTerminate: return templates::kAgentTerminate;
    case TemplateId::AgentFinalize: return templates::kAgentFinalize;
    case TemplateId::SelfCorrect: return templates::kSelfCorrect;
  }
  return {};
}

MissingBinding::MissingBinding(std::string placeholder)
    : std::runtime_error(fmt::format("missing binding for placeholder '{}'", placeholder)),
      placeholder_(std::move(placeholder)) {}

std::string render_template(std::string_view text, const Bindings& bindings) {
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto open = text.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(text.substr(pos));
      break;
    }
    auto close = text.find("}}", open + 2);
    if (close == std::string_view::npos) {
      out.append(text.substr(pos));
      break;
    }
    out.append(text.substr(pos, open - pos));
    auto name = text.substr(open + 2, close - open - 2);
    auto it = bindings.find(name);
    if (it == bindings.end()) throw MissingBinding(std::string(name));
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

std::string render_prompt(TemplateId id, const Bindings& bindings) {
  return render_template(template_text(id), bindings);
}

}  // namespace dabench::llm
