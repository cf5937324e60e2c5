#pragma once

// Batch stages behind the command-line tool. Each stage reads its inputs,
// writes JSONL under a RunDir and reports what it did; stages that loop over
// tasks resume from the run manifest.

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabench/agent.hpp"
#include "dabench/evaluation.hpp"
#include "dabench/execution.hpp"
#include "dabench/ingestion.hpp"
#include "dabench/llm.hpp"
#include "dabench/records.hpp"
#include "dabench/reward.hpp"

namespace dabench::pipeline {

// Bad config file, bad flags, or inputs that do not fit together.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Set to N to SIGKILL the process after N tasks complete (resume tests).
inline constexpr const char* kCrashAfterTasksEnv = "DABENCH_CRASH_AFTER_TASKS";

struct AppConfig {
  nlohmann::json raw = nlohmann::json::object();
  std::filesystem::path runs_dir = "runs";
  std::shared_ptr<llm::BackendRegistry> backends = std::make_shared<llm::BackendRegistry>();
  exec::Limits limits;
  agent::AgentConfig agent;
  nlohmann::json embedder = {{"kind", "lexical"}};
  std::optional<std::string> nli_endpoint;
  int workers = 1;
  std::size_t preference_pairs = 20;
  double contribution_margin = 0.05;
};

// Unknown keys are ignored; wrong types throw ConfigError.
AppConfig load_config(const nlohmann::json& j);
AppConfig load_config_file(const std::filesystem::path& path);

// database.jsonl, stats.json, stats.txt
struct IngestResult {
  std::vector<Database> databases;
  ingest::CorpusStats stats;
};
IngestResult ingest(const std::filesystem::path& corpus_dir, store::RunDir& run);

nlohmann::json stats_json(const ingest::CorpusStats& stats);

// "database.jsonl" file or a corpus directory.
std::vector<Database> load_databases(const std::filesystem::path& path);

// queries.jsonl; one manifest task per database.
struct GenQueriesResult {
  std::size_t generated = 0;  // queries written by this invocation
  std::size_t skipped = 0;    // databases already done
  std::size_t failed = 0;
};
GenQueriesResult gen_queries(const std::vector<Database>& databases, llm::Backend& backend, store::RunDir& run,
                             int workers, const llm::GenerationParams& params = {});

struct AnnotateOptions {
  int workers = 1;
  agent::AgentConfig agent;
  bool accepted_only = false;  // otherwise every non-rejected query
  std::optional<int> crash_after_tasks;
};

// Reads kCrashAfterTasksEnv.
std::optional<int> crash_after_from_env();

struct AnnotateResult {
  std::size_t executed = 0;
  std::size_t skipped = 0;  // already done in an earlier invocation
  std::size_t failed = 0;
};

// trajectories.jsonl and answers.jsonl, one line each per task. Tasks are
// queries joined with their database.
AnnotateResult annotate(const std::vector<Database>& databases, const std::vector<Query>& queries,
                        llm::Backend& backend, exec::SessionManager& sessions, store::RunDir& run,
                        const AnnotateOptions& options);

// Answer id for the agent's output on a task.
std::string answer_id(const std::string& task_id, const std::string& source);

// Keyed by task id; a task id listed twice throws ConfigError.
std::map<std::string, eval::Report> load_reports(const std::filesystem::path& answers_jsonl);

struct EvaluateOptions {
  std::vector<std::shared_ptr<llm::Backend>> judges;
  int workers = 1;
  std::string system_name = "system";
  // Judge contexts; absent entries judge with empty role and title.
  std::vector<Database> databases;
  std::vector<Query> queries;
  eval::NliScorer* nli = nullptr;
};

// judgments.jsonl and evaluation.json. Throws eval::MissingReference when
// the two files cover different task ids.
struct EvaluateResult {
  eval::WinRateReport win_rate;
  eval::EvalRow row;
};
EvaluateResult evaluate(const std::filesystem::path& system_answers, const std::filesystem::path& reference_answers,
                        store::RunDir& run, const EvaluateOptions& options);

// stats.json and stats.txt over whatever inputs are given.
nlohmann::json stats(const std::vector<Database>& databases, const std::vector<Query>& queries,
                     const std::vector<Trajectory>& trajectories, sim::Embedder& embedder, store::RunDir& run);

struct RewardsOptions {
  double margin = 0.05;
  llm::Backend* judge = nullptr;  // answer-preference pairs when set
  std::size_t max_pairs = 20;
  std::vector<Database> databases;
  std::vector<Query> queries;
};

struct RewardsResult {
  std::size_t contribution_pairs = 0;
  std::size_t answer_pairs = 0;
  std::size_t degenerate = 0;
  std::map<std::string, double> correlation;
};

// preferences.jsonl, degenerate.jsonl and api_correlation.txt.
RewardsResult rewards(const std::vector<Trajectory>& trajectories, sim::Embedder& embedder, store::RunDir& run,
                      const RewardsOptions& options);

}  // namespace dabench::pipeline
