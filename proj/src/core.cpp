#include "dabench/core.hpp"

#include <fmt/format.h>

#include <cctype>
#include <set>

#include "dabench/text.hpp"

namespace dabench {

namespace {

template <typename Enum, std::size_t N>
Enum enum_from(std::string_view s, const std::pair<Enum, std::string_view> (&table)[N],
               std::string_view what) {
  for (const auto& [value, name] : table) {
    if (name == s) return value;
  }
  throw std::invalid_argument(fmt::format("unknown {}: '{}'", what, s));
}

template <typename Enum, std::size_t N>
std::string_view enum_name(Enum e, const std::pair<Enum, std::string_view> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (value == e) return name;
  }
  return "?";
}

constexpr std::pair<ColumnKind, std::string_view> kColumnKinds[] = {
    {ColumnKind::Integer, "integer"},   {ColumnKind::Real, "real"},
    {ColumnKind::Text, "text"},         {ColumnKind::Boolean, "boolean"},
    {ColumnKind::DateLike, "date-like"},
};
constexpr std::pair<QueryStatus, std::string_view> kQueryStatuses[] = {
    {QueryStatus::Pending, "pending"},
    {QueryStatus::Accepted, "accepted"},
    {QueryStatus::Rejected, "rejected"},
};
constexpr std::pair<RejectionReason, std::string_view> kReasons[] = {
    {RejectionReason::None, ""},
    {RejectionReason::NotApplicationDriven, "not-application-driven"},
    {RejectionReason::UnanswerableFromDatabase, "unanswerable-from-database"},
};
constexpr std::pair<Termination, std::string_view> kTerminations[] = {
    {Termination::ModelDecided, "model-decided"},
    {Termination::TurnCap, "turn-cap"},
    {Termination::UnrecoverableError, "unrecoverable-error"},
};
constexpr std::pair<Section, std::string_view> kSections[] = {
    {Section::Findings, "findings"},
    {Section::Suggestions, "suggestions"},
};
constexpr std::pair<Choice, std::string_view> kChoices[] = {
    {Choice::Left, "left"},
    {Choice::Right, "right"},
    {Choice::Tie, "tie"},
};

}  // namespace

std::string_view to_string(ColumnKind kind) { return enum_name(kind, kColumnKinds); }
ColumnKind column_kind_from_string(std::string_view s) {
  return enum_from(s, kColumnKinds, "column kind");
}
std::string_view to_string(QueryStatus s) { return enum_name(s, kQueryStatuses); }
std::string_view to_string(RejectionReason r) { return enum_name(r, kReasons); }
QueryStatus query_status_from_string(std::string_view s) {
  return enum_from(s, kQueryStatuses, "query status");
}
RejectionReason rejection_reason_from_string(std::string_view s) {
  return enum_from(s, kReasons, "rejection reason");
}
std::string_view to_string(Termination t) { return enum_name(t, kTerminations); }
Termination termination_from_string(std::string_view s) {
  return enum_from(s, kTerminations, "termination");
}
std::string_view to_string(Section s) { return enum_name(s, kSections); }
Section section_from_string(std::string_view s) { return enum_from(s, kSections, "section"); }
std::string_view to_string(Choice c) { return enum_name(c, kChoices); }
Choice choice_from_string(std::string_view s) { return enum_from(s, kChoices, "choice"); }

const Table* Database::find_table(std::string_view name) const {
  for (const auto& t : tables) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::string> validate_database(const Database& db) {
  std::vector<std::string> out;
  if (db.tables.empty()) out.push_back(fmt::format("database {} has no tables", db.id));
  std::set<std::string> table_names;
  for (const auto& table : db.tables) {
    if (table.name.empty()) out.push_back("table with empty name");
    if (!table_names.insert(table.name).second) {
      out.push_back(fmt::format("duplicate table name: {}", table.name));
    }
    std::set<std::string> column_names;
    for (const auto& col : table.columns) {
      if (col.name.empty()) out.push_back(fmt::format("table {}: empty column name", table.name));
      if (!column_names.insert(col.name).second) {
        out.push_back(fmt::format("table {}: duplicate column name: {}", table.name, col.name));
      }
    }
    if (table.rows.empty()) out.push_back(fmt::format("table {}: no rows", table.name));
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      if (table.rows[r].size() != table.columns.size()) {
        out.push_back(fmt::format("table {}: row {} has {} cells, expected {}", table.name, r + 1,
                                  table.rows[r].size(), table.columns.size()));
      }
    }
  }
  return out;
}

std::string Query::display_text() const {
  if (!text.empty()) return text;
  if (role.empty()) return intention;
  return fmt::format("As a {}, I want to {}", role, intention);
}

std::vector<std::string> Analysis::gold_violations() const {
  std::vector<std::string> out;
  if (findings.size() < kMinGoldBullets) {
    out.push_back(fmt::format("at least {} findings are required, got {}", kMinGoldBullets,
                              findings.size()));
  }
  if (suggestions.size() < kMinGoldBullets) {
    out.push_back(fmt::format("at least {} suggestions are required, got {}", kMinGoldBullets,
                              suggestions.size()));
  }
  auto check = [&](const std::vector<std::string>& bullets, std::string_view section) {
    for (std::size_t i = 0; i < bullets.size(); ++i) {
      if (text::trim(bullets[i]).empty()) out.push_back(fmt::format("{} {} is empty", section, i + 1));
    }
  };
  check(findings, "finding");
  check(suggestions, "suggestion");
  return out;
}

std::vector<std::string> Trajectory::invariant_violations(int max_turns, int max_resamples,
                                                          int max_corrections_per_turn,
                                                          int max_corrections_per_session) const {
  std::vector<std::string> out;
  if (static_cast<int>(turns.size()) > max_turns) {
    out.push_back(fmt::format("{} turns exceeds cap {}", turns.size(), max_turns));
  }
  int session_corrections = 0;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const auto& t = turns[i];
    if (t.index != static_cast<int>(i) + 1) {
      out.push_back(fmt::format("turn at position {} has index {}", i + 1, t.index));
    }
    if (t.resample_count < 0 || t.resample_count > max_resamples) {
      out.push_back(fmt::format("turn {}: resample_count {} outside [0,{}]", t.index,
                                t.resample_count, max_resamples));
    }
    if (t.corrections_used < 0 || t.corrections_used > max_corrections_per_turn) {
      out.push_back(fmt::format("turn {}: corrections_used {} outside [0,{}]", t.index,
                                t.corrections_used, max_corrections_per_turn));
    }
    if (!t.observation.ok && t.observation.stderr_text.empty()) {
      out.push_back(fmt::format("turn {}: failed observation without stderr", t.index));
    }
    session_corrections += t.corrections_used;
  }
  if (session_corrections > max_corrections_per_session) {
    out.push_back(fmt::format("{} corrections exceeds session cap {}", session_corrections,
                              max_corrections_per_session));
  }
  if (termination == Termination::ModelDecided && !final_answer) {
    out.push_back("model-decided termination without a final answer");
  }
  if (!final_answer && answer_absent_reason.empty()) {
    out.push_back("final answer absent without a reason");
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string render_analysis(const Analysis& a) {
  std::string out = "Findings:\n";
  for (const auto& f : a.findings) out += fmt::format("- {}\n", f);
  out += "\nSuggestions:";
  for (const auto& s : a.suggestions) out += fmt::format("\n- {}", s);
  return out;
}

namespace {

// Length of a bullet marker at the start of s (glyph plus following
// whitespace), or 0 when s does not start with one.
std::size_t bullet_marker_length(std::string_view s) {
  auto followed_by_space = [&](std::size_t pos) {
    return pos == s.size() || s[pos] == ' ' || s[pos] == '\t';
  };
  std::size_t glyph = 0;
  if (!s.empty() && (s[0] == '-' || s[0] == '*' || s[0] == '+')) {
    glyph = 1;
  } else if (s.substr(0, 3) == "\xE2\x80\xA2") {
    glyph = 3;
  } else {
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i > 0 && i < s.size() && (s[i] == '.' || s[i] == ')')) glyph = i + 1;
  }
  if (glyph == 0 || !followed_by_space(glyph)) return 0;
  while (glyph < s.size() && (s[glyph] == ' ' || s[glyph] == '\t')) ++glyph;
  return glyph;
}

std::optional<Section> header_section(std::string_view line) {
  std::string bare;
  for (char c : line) {
    if (c != '*' && c != '#' && c != '_') bare.push_back(c);
  }
  auto t = text::to_lower(text::trim(bare));
  if (!t.empty() && t.back() == ':') t.pop_back();
  t = std::string(text::trim(t));
  if (t == "findings") return Section::Findings;
  if (t == "suggestions") return Section::Suggestions;
  return std::nullopt;
}

}  // namespace

std::string normalize_bullet(std::string_view line) {
  auto t = text::trim(line);
  t.remove_prefix(bullet_marker_length(t));
  return std::string(text::trim(t));
}

Analysis parse_analysis(std::string_view input) {
  Analysis a;
  std::optional<Section> current;
  bool saw_findings = false;
  for (const auto& raw : text::split_lines(input)) {
    auto line = text::trim(raw);
    if (line.empty()) continue;
    if (bullet_marker_length(line) == 0) {
      if (auto sec = header_section(line)) {
        current = sec;
        saw_findings = saw_findings || *sec == Section::Findings;
        continue;
      }
      // Indented prose directly under a bullet continues it.
      if (current && !raw.empty() && (raw[0] == ' ' || raw[0] == '\t')) {
        auto& list = *current == Section::Findings ? a.findings : a.suggestions;
        if (!list.empty()) list.back() += fmt::format(" {}", line);
      }
      continue;
    }
    if (!current) continue;
    auto bullet = normalize_bullet(line);
    if (bullet.empty()) continue;
    (*current == Section::Findings ? a.findings : a.suggestions).push_back(std::move(bullet));
  }
  if (!saw_findings) throw MissingSections("no findings header in analysis text");
  return a;
}

std::string content_id(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string query_id(std::string_view database_id, std::string_view query_text) {
  return content_id(fmt::format("{}\x1f{}", database_id, query_text));
}

}  // namespace dabench
