#pragma once

// JSONL persistence. Every persisted object carries "schema_version"; field
// names are frozen (see docs/records.md). A run lives in runs/<run_id>/ with
// a manifest.json next to its JSONL files.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabench/core.hpp"
#include "dabench/reward.hpp"

namespace dabench::store {

inline constexpr int kSchemaVersion = 1;

namespace files {
inline constexpr const char* kDatabases = "database.jsonl";
inline constexpr const char* kQueries = "queries.jsonl";
inline constexpr const char* kQueryDecisions = "query_decisions.jsonl";
inline constexpr const char* kTrajectories = "trajectories.jsonl";
inline constexpr const char* kAnswers = "answers.jsonl";
inline constexpr const char* kRatings = "ratings.jsonl";
inline constexpr const char* kJudgments = "judgments.jsonl";
inline constexpr const char* kPreferences = "preferences.jsonl";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace files

// A record that does not decode: wrong schema_version, missing or
// mistyped field, bad enum string.
class RecordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An answer as stored; system outputs, gold references and refined answers.
struct AnswerRecord {
  // Where a refined bullet came from; text is the candidate's wording
  // before any edit.
  struct Origin {
    Section section = Section::Findings;
    int index = 0;
    BulletRef from;
    std::string original_text;
    bool operator==(const Origin&) const = default;
  };

  std::string id;
  std::string task_id;
  std::string source;  // system name, "gold", or "refined"
  Analysis analysis;
  std::string annotator;
  std::vector<Origin> provenance;
  bool operator==(const AnswerRecord&) const = default;
};

struct QueryDecision {
  std::string query_id;
  QueryStatus status = QueryStatus::Pending;
  RejectionReason reason = RejectionReason::None;
  std::string annotator;
  bool operator==(const QueryDecision&) const = default;
};

nlohmann::json to_json(const Database& db);
nlohmann::json to_json(const Query& q);
nlohmann::json to_json(const Trajectory& t);
nlohmann::json to_json(const AnswerRecord& a);
nlohmann::json to_json(const BulletRating& r);
nlohmann::json to_json(const Judgment& j);
nlohmann::json to_json(const reward::PreferencePair& p);
nlohmann::json to_json(const QueryDecision& d);
nlohmann::json to_json(const Analysis& a);  // bare {findings, suggestions}

// Decoders throw RecordError.
template <class T>
T from_json(const nlohmann::json& j);

template <> Database from_json<Database>(const nlohmann::json& j);
template <> Query from_json<Query>(const nlohmann::json& j);
template <> Trajectory from_json<Trajectory>(const nlohmann::json& j);
template <> AnswerRecord from_json<AnswerRecord>(const nlohmann::json& j);
template <> BulletRating from_json<BulletRating>(const nlohmann::json& j);
template <> Judgment from_json<Judgment>(const nlohmann::json& j);
template <> reward::PreferencePair from_json<reward::PreferencePair>(const nlohmann::json& j);
template <> QueryDecision from_json<QueryDecision>(const nlohmann::json& j);
template <> Analysis from_json<Analysis>(const nlohmann::json& j);

// Appends one compact JSON object per line and flushes after each line.
// Safe to share between threads.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& j);
  // Pre-rendered lines, each already newline-terminated, in one write.
  void write_raw(std::string_view lines);
  template <class T>
  void append(const T& record) {
    write(to_json(record));
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mu_;
};

struct JsonlContents {
  std::vector<nlohmann::json> lines;
  bool truncated_tail = false;  // last line was unterminated and unparsable
};

// Missing file reads as empty. A malformed line that is not the
// unterminated last line throws RecordError naming path and line number.
JsonlContents read_jsonl(const std::filesystem::path& path);

template <class T>
std::vector<T> read_records(const std::filesystem::path& path) {
  std::vector<T> out;
  for (const auto& j : read_jsonl(path).lines) out.push_back(from_json<T>(j));
  return out;
}

// Rewrites a file whose last line was cut off by a crash so that later
// appends start on a fresh line. Returns true if it truncated anything.
bool repair_jsonl_tail(const std::filesystem::path& path);

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

enum class TaskStatus { Pending, Running, Done, Failed };
std::string_view to_string(TaskStatus s);
TaskStatus task_status_from_string(std::string_view s);

struct RunManifest {
  std::string run_id;
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::string started_at;   // ISO-8601 UTC
  std::string finished_at;  // empty while running
  std::map<std::string, TaskStatus> tasks;

  // Resume rule: only tasks whose status is not Done run again.
  bool needs_run(const std::string& task_id) const;
  std::size_t count(TaskStatus s) const;
};

nlohmann::json to_json(const RunManifest& m);
template <> RunManifest from_json<RunManifest>(const nlohmann::json& j);

std::string utc_now_iso8601();
// "<yyyymmdd-hhmmss>-<6 hex>"
std::string make_run_id();

// runs/<run_id>/ with a manifest kept on disk after every status change.
class RunDir {
 public:
  // Opens an existing run (resume) or creates it. On resume, every value
  // of done_key in done_file marks that task Done and Running tasks go
  // back to Pending.
  static RunDir open(const std::filesystem::path& runs_root, const std::string& run_id, const std::string& command,
                     const nlohmann::json& config, const char* done_file = files::kTrajectories,
                     const char* done_key = "task_id");

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const char* name) const { return path_ / name; }
  RunManifest manifest() const;

  void register_tasks(const std::vector<std::string>& task_ids);
  void set_status(const std::string& task_id, TaskStatus s);
  void finish();

 private:
  RunDir(std::filesystem::path path, RunManifest m);
  void save_locked() const;
  std::filesystem::path path_;
  RunManifest manifest_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

}  // namespace dabench::store
