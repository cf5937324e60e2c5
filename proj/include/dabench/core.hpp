#pragma once

// Domain types shared by every stage of the pipeline: databases, queries,
// agent trajectories, analysis answers and annotation records.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace dabench {

enum class ColumnKind { Integer, Real, Text, Boolean, DateLike };

std::string_view to_string(ColumnKind kind);
ColumnKind column_kind_from_string(std::string_view s);

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::Text;
  bool operator==(const Column&) const = default;
};

// A cell keeps the source text alongside the typed value so that prompts
// and re-materialized CSVs reproduce the original bytes.
struct Cell {
  using Value = std::variant<std::monostate, std::int64_t, double, bool, std::string>;
  std::string raw;
  Value value;

  bool empty() const { return raw.empty(); }
  bool operator==(const Cell& o) const { return raw == o.raw; }
};

struct Table {
  std::string name;
  std::vector<Column> columns;
  std::vector<std::vector<Cell>> rows;

  std::size_t n_rows() const { return rows.size(); }
  std::size_t n_columns() const { return columns.size(); }
};

struct Database {
  std::string id;
  std::string title;
  std::vector<Table> tables;

  const Table* find_table(std::string_view name) const;
};

// Returns one human-readable line per broken invariant, in table order.
// Never throws.
std::vector<std::string> validate_database(const Database& db);

enum class QueryStatus { Pending, Accepted, Rejected };
enum class RejectionReason { None, NotApplicationDriven, UnanswerableFromDatabase };

std::string_view to_string(QueryStatus s);
std::string_view to_string(RejectionReason r);
QueryStatus query_status_from_string(std::string_view s);
RejectionReason rejection_reason_from_string(std::string_view s);

struct Query {
  std::string id;
  std::string database_id;
  std::string role;
  std::string intention;
  QueryStatus status = QueryStatus::Pending;
  RejectionReason reason = RejectionReason::None;
  std::string text;  // the stakeholder sentence as generated

  // text, or a sentence rebuilt from role and intention when text is empty.
  std::string display_text() const;
};

struct Observation {
  std::string stdout_text;
  std::string stderr_text;
  bool ok = true;
  bool truncated = false;
  double wall_time = 0.0;  // seconds
};

struct Turn {
  int index = 1;
  std::string action_code;
  Observation observation;
  int resample_count = 0;
  int corrections_used = 0;
};

struct Analysis {
  std::vector<std::string> findings;
  std::vector<std::string> suggestions;
  bool operator==(const Analysis&) const = default;

  // Refined (gold) answers need at least this many bullets per section.
  static constexpr std::size_t kMinGoldBullets = 3;
  std::vector<std::string> gold_violations() const;
};

enum class Termination { ModelDecided, TurnCap, UnrecoverableError };
std::string_view to_string(Termination t);
Termination termination_from_string(std::string_view s);

struct Trajectory {
  std::string task_id;
  std::vector<Turn> turns;
  Termination termination = Termination::ModelDecided;
  std::optional<Analysis> final_answer;
  std::string answer_absent_reason;  // set iff final_answer is empty

  std::vector<std::string> invariant_violations(int max_turns = 9, int max_resamples = 5,
                                                int max_corrections_per_turn = 2,
                                                int max_corrections_per_session = 4) const;
};

// A query bound to its database; the unit of work for the agent.
struct AnalysisTask {
  std::string id;  // equals query.id
  const Database* database = nullptr;
  Query query;
};

enum class Section { Findings, Suggestions };
std::string_view to_string(Section s);
Section section_from_string(std::string_view s);

enum class Helpfulness : int { NotHelpful = 0, Borderline = 1, VeryHelpful = 2 };

struct BulletRef {
  std::string answer_id;
  Section section = Section::Findings;
  int index = 0;
  bool operator==(const BulletRef&) const = default;
};

struct BulletRating {
  BulletRef bullet;
  Helpfulness rating = Helpfulness::NotHelpful;
  std::string rater;
};

enum class Choice { Left, Right, Tie };
std::string_view to_string(Choice c);
Choice choice_from_string(std::string_view s);

struct Judgment {
  std::string task_id;
  std::string left_id;
  std::string right_id;
  Choice choice = Choice::Tie;
  std::string judge;
  std::int64_t order_seed = 0;
  std::string rationale;
};

// ---------------------------------------------------------------------------
// Analysis text format

class MissingSections : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "Findings:\n- a\n- b\n\nSuggestions:\n- c"
std::string render_analysis(const Analysis& a);

// Accepts case-insensitive headers (optionally decorated with markdown
// emphasis or '#') and bullets introduced by "-", "*", "•" or "N."/"N)".
// Throws MissingSections when no findings header is present.
Analysis parse_analysis(std::string_view text);

// Strips one leading bullet glyph or list number plus surrounding
// whitespace. Returns the input trimmed when no glyph is present.
std::string normalize_bullet(std::string_view line);

// Stable 64-bit FNV-1a digest rendered as 16 hex chars.
std::string content_id(std::string_view text);
std::string query_id(std::string_view database_id, std::string_view query_text);

}  // namespace dabench
