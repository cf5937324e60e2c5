#include <set>

#include <gtest/gtest.h>

#include "dabench/pipeline.hpp"
#include "dabench/similarity.hpp"
#include "test_util.hpp"

using namespace dabench;
using namespace dabench::pipeline;
using dabench::llm::ScriptedBackend;
using dabench::testing::TempDir;
using nlohmann::json;
namespace dt = dabench::testing;

namespace {

const char* kAnswer = "Findings:\n- sales peak on weekends\n- members are young\n\nSuggestions:\n- target students";

std::shared_ptr<ScriptedBackend> agent_backend(const std::string& name = "agent") {
  return std::make_shared<ScriptedBackend>(
      name, std::vector<ScriptedBackend::Entry>{{"Yes", "sufficiently comprehensive", true},
                                                {kAnswer, "write the final answer", true},
                                                {"```python\nprint(1 + 1)\n```", "", true}});
}

std::shared_ptr<ScriptedBackend> query_backend() {
  return std::make_shared<ScriptedBackend>(
      "qgen", std::vector<ScriptedBackend::Entry>{
                  {"1. As a store manager, I want to plan promotions\n2. As a buyer, I want to pick suppliers\n"
                   "3. As an owner, I want to set prices",
                   "", true}});
}

std::vector<Query> queries_for(const std::vector<Database>& dbs, int per_db) {
  std::vector<Query> out;
  for (const auto& db : dbs)
    for (int i = 0; i < per_db; ++i)
      out.push_back({db.id + "-q" + std::to_string(i), db.id, "manager", "decide " + std::to_string(i),
                     QueryStatus::Pending, RejectionReason::None, ""});
  return out;
}

std::multiset<std::string> task_ids(const std::filesystem::path& p) {
  std::multiset<std::string> ids;
  for (const auto& l : store::read_jsonl(p).lines) ids.insert(l.at("task_id").get<std::string>());
  return ids;
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  auto c = load_config(json::object());
  EXPECT_EQ(c.runs_dir, "runs");
  EXPECT_EQ(c.workers, 1);
  EXPECT_EQ(c.agent.max_turns, 9);
  EXPECT_EQ(c.agent.max_resamples_per_turn, 5);
  EXPECT_FALSE(c.agent.self_correction);

  c = load_config({{"workers", 4},
                   {"agent", {{"max_turns", 3}, {"self_correction", true}}},
                   {"harness", {{"command", {"h", "--x"}}, {"exec_timeout_ms", 1500}}},
                   {"nli", {{"endpoint", "http://127.0.0.1:1/nli"}}},
                   {"rewards", {{"preference_pairs", 7}}}});
  EXPECT_EQ(c.workers, 4);
  EXPECT_EQ(c.agent.max_turns, 3);
  EXPECT_TRUE(c.agent.self_correction);
  EXPECT_EQ(c.limits.harness_command, (std::vector<std::string>{"h", "--x"}));
  EXPECT_EQ(c.limits.exec_timeout, std::chrono::milliseconds(1500));
  EXPECT_EQ(c.nli_endpoint.value(), "http://127.0.0.1:1/nli");
  EXPECT_EQ(c.preference_pairs, 7u);
}

TEST(Config, ErrorsAreConfigErrors) {
  EXPECT_THROW(load_config(json::array()), ConfigError);
  EXPECT_THROW(load_config({{"workers", "two"}}), ConfigError);
  EXPECT_THROW(load_config({{"workers", 0}}), ConfigError);
  EXPECT_THROW(load_config({{"agent", 3}}), ConfigError);
  EXPECT_THROW(load_config({{"agent", {{"max_turns", 0}}}}), ConfigError);
  EXPECT_THROW(load_config({{"backends", {{{"name", "x"}, {"kind", "warp"}}}}}), ConfigError);
  TempDir dir;
  dt::write_file(dir / "bad.json", "{not json");
  EXPECT_THROW(load_config_file(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config_file(dir / "missing.json"), ConfigError);
}

TEST(Config, ScriptPathsResolveAgainstConfigDir) {
  TempDir dir;
  dt::write_file(dir / "sub/s.jsonl", R"({"response":"hi"})" "\n");
  dt::write_file(dir / "sub/cfg.json", R"({"backends":[{"name":"s","kind":"scripted","script":"s.jsonl"}]})");
  auto c = load_config_file(dir / "sub/cfg.json");
  auto b = c.backends->get("s");
  EXPECT_EQ(b->complete(llm::Conversation{}, {}), "hi");
}

TEST(Pipeline, IngestWritesDatabasesAndStats) {
  TempDir dir;
  auto run = store::RunDir::open(dir.path(), "r", "ingest", {});
  auto r = pipeline::ingest(dt::fixture("corpus"), run);
  EXPECT_EQ(r.databases.size(), 2u);
  auto dbs = load_databases(run.file(store::files::kDatabases));
  ASSERT_EQ(dbs.size(), 2u);
  EXPECT_EQ(store::to_json(dbs[0]), store::to_json(r.databases[0]));
  auto stats = json::parse(dt::read_file(run.file("stats.json")));
  EXPECT_EQ(stats.at("per_db").size(), 2u);
  EXPECT_TRUE(stats.contains("row_coverage_20"));
  EXPECT_EQ(run.manifest().count(store::TaskStatus::Done), 2u);
  EXPECT_THROW(load_databases(dir / "nope.jsonl"), ConfigError);
}

TEST(Pipeline, GenQueriesThenAnnotateEndToEnd) {
  TempDir dir;
  auto dbs = load_databases(dt::fixture("corpus"));
  auto qb = query_backend();
  auto qrun = store::RunDir::open(dir.path(), "q", "gen-queries", {}, store::files::kQueries, "database_id");
  auto g = gen_queries(dbs, *qb, qrun, 2);
  EXPECT_EQ(g.generated, 6u);
  EXPECT_EQ(g.failed, 0u);
  auto queries = store::read_records<Query>(qrun.file(store::files::kQueries));
  ASSERT_EQ(queries.size(), 6u);

  // A second invocation finds both databases done.
  auto again = store::RunDir::open(dir.path(), "q", "gen-queries", {}, store::files::kQueries, "database_id");
  EXPECT_EQ(gen_queries(dbs, *qb, again, 2).skipped, 2u);
  EXPECT_EQ(store::read_jsonl(again.file(store::files::kQueries)).lines.size(), 6u);

  auto ab = agent_backend();
  exec::SessionManager sessions(dt::fake_limits());
  auto run = store::RunDir::open(dir.path(), "a", "annotate", {});
  AnnotateOptions opts;
  opts.workers = 3;
  auto r = annotate(dbs, queries, *ab, sessions, run, opts);
  EXPECT_EQ(r.executed, 6u);
  EXPECT_EQ(r.failed, 0u);
  auto trajs = store::read_records<Trajectory>(run.file(store::files::kTrajectories));
  ASSERT_EQ(trajs.size(), 6u);
  for (const auto& t : trajs) {
    EXPECT_TRUE(t.invariant_violations().empty());
    ASSERT_EQ(t.turns.size(), 1u);
    EXPECT_EQ(t.turns[0].observation.stdout_text, "2\n");
    EXPECT_EQ(t.termination, Termination::ModelDecided);
  }
  auto answers = store::read_records<store::AnswerRecord>(run.file(store::files::kAnswers));
  ASSERT_EQ(answers.size(), 6u);
  for (const auto& a : answers) {
    EXPECT_EQ(a.source, "agent");
    EXPECT_EQ(a.id, answer_id(a.task_id, "agent"));
    EXPECT_EQ(a.analysis.findings.size(), 2u);
  }

  auto resumed = store::RunDir::open(dir.path(), "a", "annotate", {});
  auto r2 = annotate(dbs, queries, *ab, sessions, resumed, opts);
  EXPECT_EQ(r2.executed, 0u);
  EXPECT_EQ(r2.skipped, 6u);
  EXPECT_EQ(task_ids(resumed.file(store::files::kTrajectories)).size(), 6u);
}

TEST(Pipeline, AnnotateFiltersQueriesByStatus) {
  TempDir dir;
  std::vector<Database> dbs{dt::make_database("d", {dt::make_table("t", 3, 2)})};
  auto qs = queries_for(dbs, 3);
  qs[0].status = QueryStatus::Rejected;
  qs[0].reason = RejectionReason::NotApplicationDriven;
  qs[1].status = QueryStatus::Accepted;
  auto ab = agent_backend();
  exec::SessionManager sessions(dt::fake_limits());
  {
    auto run = store::RunDir::open(dir.path(), "all", "annotate", {});
    EXPECT_EQ(annotate(dbs, qs, *ab, sessions, run, {}).executed, 2u);
    EXPECT_EQ(task_ids(run.file(store::files::kTrajectories)), (std::multiset<std::string>{"d-q1", "d-q2"}));
  }
  {
    auto run = store::RunDir::open(dir.path(), "acc", "annotate", {});
    AnnotateOptions opts;
    opts.accepted_only = true;
    EXPECT_EQ(annotate(dbs, qs, *ab, sessions, run, opts).executed, 1u);
  }
  auto run = store::RunDir::open(dir.path(), "bad", "annotate", {});
  qs[2].database_id = "elsewhere";
  EXPECT_THROW(annotate(dbs, qs, *ab, sessions, run, {}), ConfigError);
}

TEST(Pipeline, AnnotateBackfillsAnswersWithoutRerunning) {
  TempDir dir;
  std::vector<Database> dbs{dt::make_database("d", {dt::make_table("t", 3, 2)})};
  auto qs = queries_for(dbs, 2);
  auto ab = agent_backend();
  exec::SessionManager sessions(dt::fake_limits());
  {
    auto run = store::RunDir::open(dir.path(), "r", "annotate", {});
    annotate(dbs, qs, *ab, sessions, run, {});
  }
  // Lose the answer lines, as if the process died after the trajectories.
  std::filesystem::remove(dir / "r/answers.jsonl");
  auto calls_before = ab->calls();
  auto run = store::RunDir::open(dir.path(), "r", "annotate", {});
  auto r = annotate(dbs, qs, *ab, sessions, run, {});
  EXPECT_EQ(r.executed, 0u);
  EXPECT_EQ(ab->calls(), calls_before);
  EXPECT_EQ(task_ids(run.file(store::files::kAnswers)), (std::multiset<std::string>{"d-q0", "d-q1"}));
}

TEST(Pipeline, FailedTaskIsMarkedAndRetried) {
  TempDir dir;
  std::vector<Database> dbs{dt::make_database("d", {dt::make_table("t", 3, 2)})};
  auto qs = queries_for(dbs, 1);
  ScriptedBackend empty("dead");
  exec::SessionManager sessions(dt::fake_limits());
  {
    auto run = store::RunDir::open(dir.path(), "r", "annotate", {});
    auto r = annotate(dbs, qs, empty, sessions, run, {});
    EXPECT_EQ(r.failed, 1u);
    EXPECT_EQ(run.manifest().tasks.at("d-q0"), store::TaskStatus::Failed);
  }
  auto ab = agent_backend();
  auto run = store::RunDir::open(dir.path(), "r", "annotate", {});
  EXPECT_EQ(annotate(dbs, qs, *ab, sessions, run, {}).executed, 1u);
}

TEST(Pipeline, EvaluateRequiresMatchingTaskIds) {
  TempDir dir;
  auto write_answers = [&](const std::string& name, const std::vector<std::string>& tasks, const std::string& source) {
    store::JsonlWriter w(dir / name);
    for (const auto& t : tasks)
      w.append(store::AnswerRecord{answer_id(t, source), t, source, Analysis{{"f " + t}, {"s " + t}}, "", {}});
  };
  write_answers("sys.jsonl", {"t1", "t2"}, "sys");
  write_answers("ref.jsonl", {"t1", "t3"}, "ref");
  write_answers("ref_ok.jsonl", {"t2", "t1"}, "ref");
  write_answers("dup.jsonl", {"t1", "t1"}, "ref");
  EXPECT_THROW(load_reports(dir / "dup.jsonl"), ConfigError);

  EvaluateOptions opts;
  opts.judges.push_back(std::make_shared<ScriptedBackend>(
      "j", std::vector<ScriptedBackend::Entry>{{"* Answer: Report-1\n* Reasoning: first", "", true}}));
  auto run = store::RunDir::open(dir.path(), "e", "evaluate", {});
  try {
    evaluate(dir / "sys.jsonl", dir / "ref.jsonl", run, opts);
    FAIL();
  } catch (const eval::MissingReference& e) {
    EXPECT_TRUE(e.task_id() == "t2" || e.task_id() == "t3") << e.task_id();
  }
  auto r = evaluate(dir / "sys.jsonl", dir / "ref_ok.jsonl", run, opts);
  // Always picking the first report gives the system one win and one loss per task.
  EXPECT_DOUBLE_EQ(r.win_rate.aggregate, 50.0);
  EXPECT_EQ(store::read_jsonl(run.file(store::files::kJudgments)).lines.size(), 4u);
  EXPECT_TRUE(std::filesystem::exists(run.file("evaluation.json")));
}

TEST(Pipeline, StatsAndRewardsWriteReports) {
  TempDir dir;
  std::vector<Database> dbs{dt::make_database("d", {dt::make_table("t", 3, 2)})};
  auto qs = queries_for(dbs, 3);
  auto ab = agent_backend();
  exec::SessionManager sessions(dt::fake_limits());
  auto arun = store::RunDir::open(dir.path(), "a", "annotate", {});
  annotate(dbs, qs, *ab, sessions, arun, {});
  auto trajs = store::read_records<Trajectory>(arun.file(store::files::kTrajectories));

  auto embedder = sim::make_embedder({{"kind", "lexical"}});
  auto srun = store::RunDir::open(dir.path(), "s", "stats", {});
  json s = stats(dbs, qs, trajs, *embedder, srun);
  EXPECT_TRUE(std::filesystem::exists(srun.file("stats.txt")));
  EXPECT_EQ(s.dump().find("print") != std::string::npos, true);

  auto rrun = store::RunDir::open(dir.path(), "w", "rewards", {});
  auto r = rewards(trajs, *embedder, rrun, {});
  // Every trajectory is one print-only turn.
  EXPECT_EQ(r.degenerate, 3u);
  EXPECT_EQ(store::read_jsonl(rrun.file("degenerate.jsonl")).lines.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(rrun.file("api_correlation.txt")));
  EXPECT_TRUE(std::filesystem::exists(rrun.file(store::files::kPreferences)));
}

TEST(Pipeline, CrashAfterFromEnv) {
  ::setenv(kCrashAfterTasksEnv, "3", 1);
  EXPECT_EQ(crash_after_from_env(), 3);
  ::setenv(kCrashAfterTasksEnv, "x", 1);
  EXPECT_THROW(crash_after_from_env(), ConfigError);
  ::unsetenv(kCrashAfterTasksEnv);
  EXPECT_FALSE(crash_after_from_env());
}
