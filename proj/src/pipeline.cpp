#include "dabench/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <set>
#include <unistd.h>

#include "dabench/parallel.hpp"
#include "dabench/querygen.hpp"
#include "dabench/similarity.hpp"

namespace dabench::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <class T>
T opt(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("config key '{}' has type {}", key, j[key].type_name()));
  }
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  if (!j[key].is_object()) throw ConfigError(fmt::format("config key '{}' must be an object", key));
  return j[key];
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
}

// Replaces a file with the given lines in one go.
void rewrite_jsonl(const fs::path& path, const std::vector<json>& lines) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto& l : lines) out << l.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
  }
  fs::rename(tmp, path);
}

void maybe_crash(const std::optional<int>& after, int completed) {
  if (after && completed >= *after) {
    spdlog::warn("{}={} reached, killing the process", kCrashAfterTasksEnv, *after);
    ::kill(::getpid(), SIGKILL);
  }
}

std::uint64_t stable_seed(const std::string& s) { return std::stoull(content_id(s), nullptr, 16); }

json summary_json(const ingest::Summary& s) { return {{"median", s.median}, {"max", s.max}, {"min", s.min}}; }

// Judge contexts by task id from whatever queries and databases are known.
class Contexts {
 public:
  Contexts(const std::vector<Database>& dbs, const std::vector<Query>& queries) {
    std::map<std::string, std::string> titles;
    for (const auto& d : dbs) titles[d.id] = d.title;
    for (const auto& q : queries) {
      auto t = titles.find(q.database_id);
      by_id_[q.id] = {q.id, t == titles.end() ? q.database_id : t->second, q.role, q.intention};
    }
  }
  eval::JudgeContext get(const std::string& task_id) const {
    auto it = by_id_.find(task_id);
    if (it != by_id_.end()) return it->second;
    return {task_id, "", "", ""};
  }

 private:
  std::map<std::string, eval::JudgeContext> by_id_;
};

}  // namespace

AppConfig load_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  AppConfig c;
  c.raw = j;
  c.runs_dir = opt<std::string>(j, "runs_dir", "runs");
  try {
    c.backends = std::make_shared<llm::BackendRegistry>(json{{"backends", j.value("backends", json::array())}});
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("backends: {}", e.what()));
  }

  const json& h = section(j, "harness");
  c.limits.harness_command = opt<std::vector<std::string>>(h, "command", {});
  c.limits.exec_timeout = std::chrono::milliseconds(opt<long>(h, "exec_timeout_ms", 30000));
  c.limits.handshake_timeout = std::chrono::milliseconds(opt<long>(h, "handshake_timeout_ms", 30000));
  c.limits.stdout_cap_bytes = opt<std::size_t>(h, "stdout_cap_bytes", exec::kDefaultStdoutCapBytes);
  c.limits.scratch_root = opt<std::string>(h, "scratch_root", "");

  const json& a = section(j, "agent");
  c.agent.max_turns = opt(a, "max_turns", c.agent.max_turns);
  c.agent.max_resamples_per_turn = opt(a, "max_resamples_per_turn", c.agent.max_resamples_per_turn);
  c.agent.self_correction = opt(a, "self_correction", c.agent.self_correction);
  c.agent.max_corrections_per_turn = opt(a, "max_corrections_per_turn", c.agent.max_corrections_per_turn);
  c.agent.max_corrections_per_session = opt(a, "max_corrections_per_session", c.agent.max_corrections_per_session);
  c.agent.observation_cap_chars = opt(a, "observation_cap_chars", c.agent.observation_cap_chars);
  c.agent.params.temperature = opt(a, "temperature", c.agent.params.temperature);
  c.agent.params.nucleus_p = opt(a, "nucleus_p", c.agent.params.nucleus_p);
  c.agent.params.max_tokens = opt(a, "max_tokens", c.agent.params.max_tokens);
  if (a.contains("seed") && !a["seed"].is_null()) c.agent.params.seed = opt<std::int64_t>(a, "seed", 0);
  auto bad = c.agent.violations();
  if (!bad.empty()) throw ConfigError(fmt::format("agent: {}", fmt::join(bad, "; ")));

  if (j.contains("embedder")) c.embedder = j["embedder"];
  const json& nli = section(j, "nli");
  if (nli.contains("endpoint")) c.nli_endpoint = opt<std::string>(nli, "endpoint", "");
  c.workers = opt(j, "workers", 1);
  if (c.workers < 1) throw ConfigError("workers must be at least 1");
  const json& r = section(j, "rewards");
  c.preference_pairs = opt<std::size_t>(r, "preference_pairs", 20);
  c.contribution_margin = opt(r, "contribution_margin", 0.05);
  return c;
}

AppConfig load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  // Relative script paths are relative to the config file.
  fs::path base = fs::absolute(path).parent_path();
  if (j.contains("backends") && j["backends"].is_array()) {
    for (auto& b : j["backends"]) {
      if (b.is_object() && b.contains("script") && b["script"].is_string()) {
        fs::path p = b["script"].get<std::string>();
        if (p.is_relative()) b["script"] = (base / p).string();
      }
    }
  }
  return load_config(j);
}

json stats_json(const ingest::CorpusStats& stats) {
  json per_db = json::array();
  for (const auto& d : stats.per_db)
    per_db.push_back({{"database_id", d.database_id},
                      {"n_tables", d.n_tables},
                      {"n_columns", d.n_columns},
                      {"n_rows", d.n_rows}});
  return {{"per_db", std::move(per_db)},
          {"tables", summary_json(stats.tables)},
          {"columns", summary_json(stats.columns)},
          {"rows", summary_json(stats.rows)}};
}

IngestResult ingest(const fs::path& corpus_dir, store::RunDir& run) {
  IngestResult r;
  r.databases = ingest::load_corpus(corpus_dir);
  std::vector<json> lines;
  std::vector<std::string> ids;
  for (const auto& db : r.databases) {
    lines.push_back(store::to_json(db));
    ids.push_back(db.id);
  }
  rewrite_jsonl(run.file(store::files::kDatabases), lines);
  r.stats = ingest::corpus_stats(r.databases);
  json sj = stats_json(r.stats);
  sj["row_coverage_20"] = ingest::row_coverage(r.databases, 20);
  store::write_json_atomic(run.file("stats.json"), sj);
  write_text(run.file("stats.txt"), ingest::format_stats_report(r.stats));
  run.register_tasks(ids);
  for (const auto& id : ids) run.set_status(id, store::TaskStatus::Done);
  return r;
}

std::vector<Database> load_databases(const fs::path& path) {
  if (fs::is_directory(path)) return ingest::load_corpus(path);
  if (!fs::exists(path)) throw ConfigError(fmt::format("no such file: {}", path.string()));
  return store::read_records<Database>(path);
}

GenQueriesResult gen_queries(const std::vector<Database>& databases, llm::Backend& backend, store::RunDir& run,
                             int workers, const llm::GenerationParams& params) {
  GenQueriesResult res;
  std::vector<std::string> ids;
  for (const auto& db : databases) ids.push_back(db.id);
  run.register_tasks(ids);
  auto manifest = run.manifest();
  std::vector<const Database*> pending;
  for (const auto& db : databases) {
    if (manifest.needs_run(db.id)) pending.push_back(&db);
    else ++res.skipped;
  }
  store::JsonlWriter out(run.file(store::files::kQueries));
  std::mutex mu;
  parallel_for(pending.size(), workers, [&](std::size_t i) {
    const Database& db = *pending[i];
    run.set_status(db.id, store::TaskStatus::Running);
    try {
      auto qs = querygen::generate_queries(db, backend, params);
      // One buffered write per database so a crash never leaves half a set.
      std::string block;
      for (const auto& q : qs) block += store::to_json(q).dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
      out.write_raw(block);
      run.set_status(db.id, store::TaskStatus::Done);
      std::lock_guard lock(mu);
      res.generated += qs.size();
    } catch (const std::exception& e) {
      spdlog::error("database {}: query generation failed: {}", db.id, e.what());
      run.set_status(db.id, store::TaskStatus::Failed);
      std::lock_guard lock(mu);
      ++res.failed;
    }
  });
  return res;
}

std::optional<int> crash_after_from_env() {
  const char* v = std::getenv(kCrashAfterTasksEnv);
  if (!v || !*v) return std::nullopt;
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("{} must be an integer, got '{}'", kCrashAfterTasksEnv, v));
  }
}

std::string answer_id(const std::string& task_id, const std::string& source) {
  return content_id(fmt::format("{}\x1f{}", task_id, source));
}

AnnotateResult annotate(const std::vector<Database>& databases, const std::vector<Query>& queries,
                        llm::Backend& backend, exec::SessionManager& sessions, store::RunDir& run,
                        const AnnotateOptions& options) {
  auto bad = options.agent.violations();
  if (!bad.empty()) throw ConfigError(fmt::format("agent: {}", fmt::join(bad, "; ")));
  std::map<std::string, const Database*> by_id;
  for (const auto& db : databases) by_id[db.id] = &db;

  std::vector<AnalysisTask> tasks;
  std::set<std::string> seen;
  for (const auto& q : queries) {
    if (q.status == QueryStatus::Rejected) continue;
    if (options.accepted_only && q.status != QueryStatus::Accepted) continue;
    if (!seen.insert(q.id).second) continue;
    auto it = by_id.find(q.database_id);
    if (it == by_id.end()) throw ConfigError(fmt::format("query {} refers to unknown database '{}'", q.id, q.database_id));
    tasks.push_back({q.id, it->second, q});
  }
  std::vector<std::string> ids;
  for (const auto& t : tasks) ids.push_back(t.id);
  run.register_tasks(ids);

  const std::string source = backend.name();
  // A crash between the trajectory line and the answer line leaves the
  // task done without an answer; fill those in before new work.
  std::set<std::string> have_answer;
  for (const auto& a : store::read_records<store::AnswerRecord>(run.file(store::files::kAnswers)))
    have_answer.insert(a.task_id);
  store::JsonlWriter traj_out(run.file(store::files::kTrajectories));
  store::JsonlWriter ans_out(run.file(store::files::kAnswers));
  for (const auto& t : store::read_records<Trajectory>(run.file(store::files::kTrajectories))) {
    if (t.final_answer && !have_answer.count(t.task_id)) {
      ans_out.append(store::AnswerRecord{answer_id(t.task_id, source), t.task_id, source, *t.final_answer, "", {}});
      have_answer.insert(t.task_id);
    }
  }

  auto manifest = run.manifest();
  AnnotateResult res;
  std::vector<const AnalysisTask*> pending;
  for (const auto& t : tasks) {
    if (manifest.needs_run(t.id)) pending.push_back(&t);
    else ++res.skipped;
  }
  std::atomic<int> completed{0};
  std::atomic<std::size_t> failed{0};
  parallel_for(pending.size(), options.workers, [&](std::size_t i) {
    const AnalysisTask& task = *pending[i];
    run.set_status(task.id, store::TaskStatus::Running);
    try {
      auto session = sessions.open(*task.database);
      Trajectory t = agent::run_analysis(task, backend, *session, options.agent);
      session->close();
      traj_out.append(t);
      if (t.final_answer)
        ans_out.append(store::AnswerRecord{answer_id(task.id, source), task.id, source, *t.final_answer, "", {}});
      run.set_status(task.id, store::TaskStatus::Done);
      spdlog::info("task {}: {} turns, {}", task.id, t.turns.size(), to_string(t.termination));
      maybe_crash(options.crash_after_tasks, ++completed);
    } catch (const std::exception& e) {
      spdlog::error("task {}: {}", task.id, e.what());
      run.set_status(task.id, store::TaskStatus::Failed);
      ++failed;
    }
  });
  res.executed = static_cast<std::size_t>(completed.load());
  res.failed = failed.load();
  return res;
}

std::map<std::string, eval::Report> load_reports(const fs::path& answers_jsonl) {
  if (!fs::exists(answers_jsonl)) throw ConfigError(fmt::format("no such file: {}", answers_jsonl.string()));
  std::map<std::string, eval::Report> out;
  for (const auto& a : store::read_records<store::AnswerRecord>(answers_jsonl)) {
    if (!out.emplace(a.task_id, eval::Report{a.id, a.analysis}).second)
      throw ConfigError(fmt::format("{}: task {} listed twice", answers_jsonl.string(), a.task_id));
  }
  return out;
}

EvaluateResult evaluate(const fs::path& system_answers, const fs::path& reference_answers, store::RunDir& run,
                        const EvaluateOptions& options) {
  if (options.judges.empty()) throw ConfigError("evaluate needs at least one judge");
  auto sys = load_reports(system_answers);
  auto ref = load_reports(reference_answers);
  std::set<std::string> ids;
  for (const auto& [id, r] : sys) ids.insert(id);
  for (const auto& [id, r] : ref) ids.insert(id);
  for (const auto& id : ids) {
    if (!sys.count(id) || !ref.count(id)) throw eval::MissingReference(id);
  }
  Contexts contexts(options.databases, options.queries);
  std::vector<eval::JudgeContext> ctx;
  for (const auto& id : ids) ctx.push_back(contexts.get(id));

  EvaluateResult res;
  res.win_rate = eval::winning_rate(sys, ref, ctx, options.judges, options.workers);
  store::JsonlWriter jout(run.file(store::files::kJudgments));
  for (const auto& j : res.win_rate.judgments) jout.append(j);

  std::vector<std::string> cands, refs;
  double entail_sum = 0;
  for (const auto& id : ids) {
    cands.push_back(eval::analysis_text(sys.at(id).analysis));
    refs.push_back(eval::analysis_text(ref.at(id).analysis));
    if (options.nli) entail_sum += eval::entailment(sys.at(id).analysis, ref.at(id).analysis, *options.nli);
  }
  res.row.system = options.system_name;
  res.row.split = reference_answers.stem().string();
  res.row.helpfulness = res.win_rate.aggregate;
  res.row.bleu = eval::bleu(cands, refs);
  if (options.nli) res.row.entailment = 100.0 * entail_sum / static_cast<double>(ids.size());

  json per_judge = json::object();
  for (const auto& [name, rate] : res.win_rate.per_judge) per_judge[name] = rate;
  store::write_json_atomic(run.file("evaluation.json"),
                           {{"system", options.system_name},
                            {"n_tasks", ids.size()},
                            {"per_judge", per_judge},
                            {"aggregate", res.win_rate.aggregate},
                            {"n_comparisons", res.win_rate.n_comparisons},
                            {"tie_count", res.win_rate.tie_count},
                            {"table", eval::eval_table_json({res.row})}});
  write_text(run.file("evaluation.txt"), eval::format_eval_table({res.row}));
  return res;
}

json stats(const std::vector<Database>& databases, const std::vector<Query>& queries,
           const std::vector<Trajectory>& trajectories, sim::Embedder& embedder, store::RunDir& run) {
  json out = json::object();
  std::string text;
  if (!databases.empty()) {
    auto cs = ingest::corpus_stats(databases);
    out["corpus"] = stats_json(cs);
    out["corpus"]["row_coverage_20"] = ingest::row_coverage(databases, 20);
    text += ingest::format_stats_report(cs) + "\n";
  }
  if (!queries.empty()) {
    bool any_accepted = std::any_of(queries.begin(), queries.end(),
                                    [](const Query& q) { return q.status == QueryStatus::Accepted; });
    json d = {{"scope", any_accepted ? "accepted" : "all"}, {"n_queries", queries.size()}};
    try {
      auto r = querygen::diversity_buckets(queries, embedder, !any_accepted);
      d["low"] = r.low;
      d["medium"] = r.medium;
      d["high"] = r.high;
      d["n_pairs"] = r.n_pairs;
      text += fmt::format("Query similarity ({} pairs, {} queries)\n  low (<0.5)      {:6.2f}%\n  medium          {:6.2f}%\n"
                          "  high (>0.8)     {:6.2f}%\n\n",
                          r.n_pairs, d["scope"].get<std::string>(), r.low, r.medium, r.high);
    } catch (const querygen::TooFewQueries& e) {
      d["error"] = e.what();
    }
    out["diversity"] = std::move(d);
  }
  if (!trajectories.empty()) {
    reward::ApiCounts apis;
    std::vector<std::size_t> turns, findings, suggestions;
    std::map<std::string, int> terminations;
    std::size_t answered = 0;
    for (const auto& t : trajectories) {
      turns.push_back(t.turns.size());
      ++terminations[std::string(to_string(t.termination))];
      for (const auto& turn : t.turns)
        for (const auto& [name, n] : reward::extract_api_calls(turn.action_code)) apis[name] += n;
      if (t.final_answer) {
        ++answered;
        findings.push_back(t.final_answer->findings.size());
        suggestions.push_back(t.final_answer->suggestions.size());
      }
    }
    json tj = {{"n", trajectories.size()},
               {"answered", answered},
               {"turns", summary_json(ingest::summarize(turns))},
               {"terminations", terminations},
               {"api_calls", apis}};
    if (!findings.empty()) {
      tj["findings"] = summary_json(ingest::summarize(findings));
      tj["suggestions"] = summary_json(ingest::summarize(suggestions));
    }
    out["trajectories"] = std::move(tj);
    std::vector<std::pair<std::string, int>> ranked(apis.begin(), apis.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
    text += fmt::format("Trajectories: {} ({} answered)\nAPI calls\n", trajectories.size(), answered);
    for (std::size_t i = 0; i < ranked.size() && i < 20; ++i)
      text += fmt::format("  {:<20} {}\n", ranked[i].first, ranked[i].second);
  }
  store::write_json_atomic(run.file("stats.json"), out);
  write_text(run.file("stats.txt"), text);
  return out;
}

RewardsResult rewards(const std::vector<Trajectory>& trajectories, sim::Embedder& embedder, store::RunDir& run,
                      const RewardsOptions& options) {
  RewardsResult res;
  store::JsonlWriter prefs(run.file(store::files::kPreferences));
  store::JsonlWriter degen(run.file("degenerate.jsonl"));
  std::vector<reward::StepScore> pooled;
  Contexts contexts(options.databases, options.queries);
  for (const auto& t : trajectories) {
    auto d = reward::detect_degenerate_pattern(t, embedder);
    degen.write({{"schema_version", store::kSchemaVersion},
                 {"task_id", t.task_id},
                 {"flagged", d.flagged},
                 {"reasons", d.reasons},
                 {"print_only_fraction", d.print_only_fraction},
                 {"max_ngram_count", d.max_ngram_count},
                 {"repetition", d.repetition}});
    res.degenerate += d.flagged;
    if (!t.final_answer) continue;
    auto scores = reward::contribution_scores(t, embedder);
    for (const auto& p : reward::contribution_pairs(scores, options.margin, &t)) {
      prefs.append(p);
      ++res.contribution_pairs;
    }
    pooled.insert(pooled.end(), scores.begin(), scores.end());
    if (options.judge) {
      std::vector<std::string> bullets = t.final_answer->findings;
      bullets.insert(bullets.end(), t.final_answer->suggestions.begin(), t.final_answer->suggestions.end());
      if (bullets.size() < 2) continue;
      for (const auto& p : reward::collect_answer_preferences(contexts.get(t.task_id), bullets, *options.judge,
                                                              options.max_pairs, stable_seed(t.task_id))) {
        prefs.append(p);
        ++res.answer_pairs;
      }
    }
  }
  try {
    res.correlation = reward::api_contribution_correlation(pooled);
  } catch (const reward::TooFewSteps&) {
    spdlog::warn("fewer than two scored steps; no API correlation");
  }
  write_text(run.file("api_correlation.txt"), reward::format_correlation_report(res.correlation));
  return res;
}

}  // namespace dabench::pipeline
