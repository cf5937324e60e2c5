// dabench: command-line entry point. Every subcommand writes under
// <runs_dir>/<run_id>/. Exit status: 0 success, 1 some task failed,
// 2 usage or configuration error.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dabench/evaluation.hpp"
#include "dabench/pipeline.hpp"
#include "dabench/querygen.hpp"
#include "dabench/records.hpp"
#include "dabench/service.hpp"
#include "dabench/similarity.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dabench;
using pipeline::ConfigError;

namespace {

constexpr int kOk = 0;
constexpr int kTaskFailure = 1;
constexpr int kConfigError = 2;

struct Globals {
  std::string config_path;
  std::string runs_dir;
  std::string run_id;
  std::string log_level = "info";
};

pipeline::AppConfig load(const Globals& g) {
  auto cfg = g.config_path.empty() ? pipeline::load_config(json::object()) : pipeline::load_config_file(g.config_path);
  if (!g.runs_dir.empty()) cfg.runs_dir = g.runs_dir;
  return cfg;
}

store::RunDir open_run(const Globals& g, const pipeline::AppConfig& cfg, const std::string& command, json flags,
                       const char* done_file = store::files::kTrajectories, const char* done_key = "task_id") {
  std::string id = g.run_id.empty() ? store::make_run_id() : g.run_id;
  json snapshot = {{"config", cfg.raw}, {"flags", std::move(flags)}};
  auto run = store::RunDir::open(cfg.runs_dir, id, command, snapshot, done_file, done_key);
  std::cout << "run " << id << " -> " << run.path().string() << std::endl;
  return run;
}

std::shared_ptr<llm::Backend> backend(const pipeline::AppConfig& cfg, const std::string& name) {
  try {
    return cfg.backends->get(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <class T>
std::vector<T> optional_records(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw ConfigError(fmt::format("no such file: {}", path));
  return store::read_records<T>(path);
}

std::vector<Database> optional_databases(const std::string& path) {
  if (path.empty()) return {};
  return pipeline::load_databases(path);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Copies name from each source dir into state_dir when state_dir lacks it.
void seed_state_dir(const fs::path& state_dir, const std::vector<std::string>& sources) {
  using namespace store::files;
  for (const char* name : {kDatabases, kQueries, kAnswers}) {
    if (fs::exists(state_dir / name)) continue;
    store::JsonlWriter out(state_dir / name);
    for (const auto& src : sources)
      for (const auto& line : store::read_jsonl(fs::path(src) / name).lines) out.write(line);
  }
}

int run_serve(const std::string& state_arg, const std::string& host, int port, const std::string& static_dir,
              const std::vector<std::string>& seed_from) {
  std::string state = state_arg;
  if (state.empty()) {
    const char* env = std::getenv(service::kStateDirEnv);
    if (env) state = env;
  }
  if (state.empty()) throw ConfigError(fmt::format("no state dir: pass --state-dir or set {}", service::kStateDirEnv));
  if (!seed_from.empty()) {
    fs::create_directories(state);
    seed_state_dir(state, seed_from);
  }
  if (!fs::is_directory(state)) throw ConfigError(fmt::format("state dir {} does not exist", state));

  // Signals are taken synchronously by one thread so the server shuts down
  // cleanly.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  auto core = std::make_shared<service::AnnotationService>(state);
  std::optional<fs::path> stat;
  if (!static_dir.empty()) stat = static_dir;
  service::HttpService http(core, stat);
  int bound = http.bind(host, port);
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("signal {}, shutting down", sig);
    http.stop();
  });
  waiter.detach();
  http.listen();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("dabench"));
  CLI::App app{"Data-analysis agent benchmark tools"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--runs-dir", g.runs_dir, "Root for run directories (overrides the config)");
  app.add_option("--run-id", g.run_id, "Resume or name a run");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));

  std::string corpus;
  auto* ingest_cmd = app.add_subcommand("ingest", "Load a CSV corpus, write database.jsonl and corpus statistics");
  ingest_cmd->add_option("corpus_dir", corpus, "corpus/<db_id>/<table>.csv")->required()->check(CLI::ExistingDirectory);

  std::string backend_name, databases_path, queries_path;
  int workers = 0;
  auto* gen_cmd = app.add_subcommand("gen-queries", "Ask a backend for stakeholder queries per database");
  gen_cmd->add_option("--backend", backend_name, "Backend name from the config")->required();
  gen_cmd->add_option("--databases", databases_path, "database.jsonl or a corpus directory")->required();
  gen_cmd->add_option("--workers", workers, "Parallel databases")->check(CLI::PositiveNumber);

  bool self_correct = false, accepted_only = false;
  auto* annotate_cmd = app.add_subcommand("annotate", "Run the analysis agent on every query");
  annotate_cmd->add_option("--backend", backend_name, "Agent backend")->required();
  annotate_cmd->add_option("--databases", databases_path, "database.jsonl or a corpus directory")->required();
  annotate_cmd->add_option("--queries", queries_path, "queries.jsonl")->required();
  annotate_cmd->add_option("--workers", workers, "Parallel tasks")->check(CLI::PositiveNumber);
  annotate_cmd->add_flag("--self-correct", self_correct, "Repair failing code from the error message");
  annotate_cmd->add_flag("--accepted-only", accepted_only, "Skip queries not accepted by annotators");

  std::string system_path, reference_path, judges_arg, system_name;
  auto* eval_cmd = app.add_subcommand("evaluate", "Pairwise helpfulness winning rate against references");
  eval_cmd->add_option("--system", system_path, "answers.jsonl of the system")->required();
  eval_cmd->add_option("--reference", reference_path, "answers.jsonl of the references")->required();
  eval_cmd->add_option("--judges", judges_arg, "Comma-separated judge backends")->required();
  eval_cmd->add_option("--queries", queries_path, "queries.jsonl for judge context");
  eval_cmd->add_option("--databases", databases_path, "database.jsonl for judge context");
  eval_cmd->add_option("--workers", workers, "Parallel judgments")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--name", system_name, "System name in the report");

  std::string trajectories_path;
  auto* stats_cmd = app.add_subcommand("stats", "Corpus, query-diversity and API-usage statistics");
  stats_cmd->add_option("--databases", databases_path, "database.jsonl or a corpus directory");
  stats_cmd->add_option("--queries", queries_path, "queries.jsonl");
  stats_cmd->add_option("--trajectories", trajectories_path, "trajectories.jsonl");

  std::string judge_name;
  auto* rewards_cmd = app.add_subcommand("rewards", "Preference pairs, API correlation and degenerate patterns");
  rewards_cmd->add_option("trajectories", trajectories_path, "trajectories.jsonl")->required();
  rewards_cmd->add_option("--judge", judge_name, "Backend for answer-level preference pairs");
  rewards_cmd->add_option("--queries", queries_path, "queries.jsonl for judge context");
  rewards_cmd->add_option("--databases", databases_path, "database.jsonl for judge context");

  std::string state_dir, host = "127.0.0.1", static_dir;
  std::vector<std::string> seed_from;
  int port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for the annotation console");
  serve_cmd->add_option("--port", port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--state-dir", state_dir, fmt::format("State directory (default ${})", service::kStateDirEnv));
  serve_cmd->add_option("--static", static_dir, "Directory of UI files served at /");
  serve_cmd->add_option("--seed-from", seed_from, "Run dirs whose databases/queries/answers initialize the state dir");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kConfigError;
  }
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*serve_cmd) return run_serve(state_dir, host, port, static_dir, seed_from);

    auto cfg = load(g);
    int n_workers = workers > 0 ? workers : cfg.workers;

    if (*ingest_cmd) {
      auto run = open_run(g, cfg, "ingest", {{"corpus_dir", corpus}});
      auto r = pipeline::ingest(corpus, run);
      run.finish();
      std::cout << ingest::format_stats_report(r.stats);
      return kOk;
    }
    if (*gen_cmd) {
      auto dbs = pipeline::load_databases(databases_path);
      auto b = backend(cfg, backend_name);
      auto run = open_run(g, cfg, "gen-queries", {{"backend", backend_name}, {"databases", databases_path}},
                          store::files::kQueries, "database_id");
      auto r = pipeline::gen_queries(dbs, *b, run, n_workers, cfg.agent.params);
      run.finish();
      std::cout << fmt::format("{} queries generated, {} databases skipped, {} failed\n", r.generated, r.skipped,
                               r.failed);
      return r.failed ? kTaskFailure : kOk;
    }
    if (*annotate_cmd) {
      if (cfg.limits.harness_command.empty()) throw ConfigError("harness.command is not set in the config");
      auto dbs = pipeline::load_databases(databases_path);
      auto queries = optional_records<Query>(queries_path);
      auto b = backend(cfg, backend_name);
      pipeline::AnnotateOptions opts;
      opts.workers = n_workers;
      opts.agent = cfg.agent;
      if (self_correct) opts.agent.self_correction = true;
      opts.accepted_only = accepted_only;
      opts.crash_after_tasks = pipeline::crash_after_from_env();
      auto run = open_run(g, cfg, "annotate",
                          {{"backend", backend_name}, {"databases", databases_path}, {"queries", queries_path},
                           {"workers", n_workers}, {"self_correct", opts.agent.self_correction},
                           {"accepted_only", accepted_only}});
      exec::SessionManager sessions(cfg.limits);
      auto r = pipeline::annotate(dbs, queries, *b, sessions, run, opts);
      run.finish();
      std::cout << fmt::format("{} tasks executed, {} skipped, {} failed\n", r.executed, r.skipped, r.failed);
      return r.failed ? kTaskFailure : kOk;
    }
    if (*eval_cmd) {
      for (const auto& p : {system_path, reference_path})
        if (!fs::exists(p)) throw ConfigError(fmt::format("no such file: {}", p));
      pipeline::EvaluateOptions opts;
      auto names = split_csv(judges_arg);
      if (names.empty()) throw ConfigError("--judges lists no backend");
      for (const auto& n : names) opts.judges.push_back(backend(cfg, n));
      opts.workers = n_workers;
      opts.system_name = system_name.empty() ? fs::path(system_path).parent_path().filename().string() : system_name;
      if (opts.system_name.empty()) opts.system_name = "system";
      opts.queries = optional_records<Query>(queries_path);
      opts.databases = optional_databases(databases_path);
      std::unique_ptr<eval::RemoteNli> nli;
      if (cfg.nli_endpoint) {
        nli = std::make_unique<eval::RemoteNli>(*cfg.nli_endpoint);
        opts.nli = nli.get();
      }
      auto run = open_run(g, cfg, "evaluate",
                          {{"system", system_path}, {"reference", reference_path}, {"judges", names}});
      auto r = pipeline::evaluate(system_path, reference_path, run, opts);
      run.finish();
      std::cout << eval::format_eval_table({r.row});
      for (const auto& [name, rate] : r.win_rate.per_judge) std::cout << fmt::format("  {:<16} {:6.2f}\n", name, rate);
      return kOk;
    }
    if (*stats_cmd) {
      if (databases_path.empty() && queries_path.empty() && trajectories_path.empty())
        throw ConfigError("stats needs --databases, --queries or --trajectories");
      auto embedder = sim::make_embedder(cfg.embedder);
      auto run = open_run(g, cfg, "stats",
                          {{"databases", databases_path}, {"queries", queries_path}, {"trajectories", trajectories_path}});
      pipeline::stats(optional_databases(databases_path), optional_records<Query>(queries_path),
                      optional_records<Trajectory>(trajectories_path), *embedder, run);
      run.finish();
      std::ifstream in(run.file("stats.txt"));
      std::cout << in.rdbuf();
      return kOk;
    }
    if (*rewards_cmd) {
      auto trajectories = optional_records<Trajectory>(trajectories_path);
      auto embedder = sim::make_embedder(cfg.embedder);
      pipeline::RewardsOptions opts;
      opts.margin = cfg.contribution_margin;
      opts.max_pairs = cfg.preference_pairs;
      std::shared_ptr<llm::Backend> judge;
      if (!judge_name.empty()) {
        judge = backend(cfg, judge_name);
        opts.judge = judge.get();
      }
      opts.queries = optional_records<Query>(queries_path);
      opts.databases = optional_databases(databases_path);
      auto run = open_run(g, cfg, "rewards", {{"trajectories", trajectories_path}, {"judge", judge_name}});
      auto r = pipeline::rewards(trajectories, *embedder, run, opts);
      run.finish();
      std::cout << fmt::format("{} contribution pairs, {} answer pairs, {} degenerate trajectories\n",
                               r.contribution_pairs, r.answer_pairs, r.degenerate);
      std::cout << reward::format_correlation_report(r.correlation);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const eval::MissingReference& e) {
    std::cerr << "config error: task " << e.task_id() << " is missing from the system or the reference answers\n";
    return kConfigError;
  } catch (const store::RecordError& e) {
    std::cerr << "config error: bad input record: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kTaskFailure;
  }
  return kConfigError;
}
