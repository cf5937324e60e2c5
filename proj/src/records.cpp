#include "dabench/records.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <random>
#include <sstream>
#include <unistd.h>

#include "dabench/ingestion.hpp"

namespace dabench::store {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const json& field(const json& j, const char* key) {
  if (!j.is_object()) throw RecordError(fmt::format("expected an object, got {}", j.type_name()));
  auto it = j.find(key);
  if (it == j.end()) throw RecordError(fmt::format("missing field '{}'", key));
  return *it;
}

template <class T>
T get(const json& j, const char* key) {
  const json& v = field(j, key);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw RecordError(fmt::format("field '{}' has type {}", key, v.type_name()));
  }
}

std::vector<std::string> strings(const json& j, const char* key) { return get<std::vector<std::string>>(j, key); }

void check_version(const json& j) {
  int v = get<int>(j, "schema_version");
  if (v != kSchemaVersion) throw RecordError(fmt::format("schema_version {} (expected {})", v, kSchemaVersion));
}

json versioned(json j) {
  j["schema_version"] = kSchemaVersion;
  return j;
}

// Runs a decoder, mapping enum and json errors onto RecordError.
template <class F>
auto decode(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const RecordError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw RecordError(e.what());
  } catch (const json::exception& e) {
    throw RecordError(e.what());
  }
}

json ref_json(const BulletRef& r) {
  return {{"answer_id", r.answer_id}, {"section", std::string(to_string(r.section))}, {"index", r.index}};
}

BulletRef ref_from(const json& j) {
  return {get<std::string>(j, "answer_id"), section_from_string(get<std::string>(j, "section")), get<int>(j, "index")};
}

}  // namespace

json to_json(const Analysis& a) { return {{"findings", a.findings}, {"suggestions", a.suggestions}}; }

template <>
Analysis from_json<Analysis>(const json& j) {
  return decode([&] { return Analysis{strings(j, "findings"), strings(j, "suggestions")}; });
}

json to_json(const Database& db) {
  json tables = json::array();
  for (const auto& t : db.tables) {
    json cols = json::array();
    for (const auto& c : t.columns) cols.push_back({{"name", c.name}, {"kind", std::string(to_string(c.kind))}});
    json rows = json::array();
    for (const auto& r : t.rows) {
      json row = json::array();
      for (const auto& cell : r) row.push_back(cell.raw);
      rows.push_back(std::move(row));
    }
    tables.push_back({{"name", t.name}, {"columns", std::move(cols)}, {"rows", std::move(rows)}});
  }
  return versioned({{"id", db.id}, {"title", db.title}, {"tables", std::move(tables)}});
}

template <>
Database from_json<Database>(const json& j) {
  return decode([&] {
    check_version(j);
    Database db;
    db.id = get<std::string>(j, "id");
    db.title = get<std::string>(j, "title");
    for (const auto& tj : field(j, "tables")) {
      Table t;
      t.name = get<std::string>(tj, "name");
      for (const auto& cj : field(tj, "columns"))
        t.columns.push_back({get<std::string>(cj, "name"), column_kind_from_string(get<std::string>(cj, "kind"))});
      for (const auto& rj : field(tj, "rows")) {
        auto raw = rj.get<std::vector<std::string>>();
        if (raw.size() != t.columns.size())
          throw RecordError(fmt::format("table '{}': row has {} cells for {} columns", t.name, raw.size(),
                                        t.columns.size()));
        std::vector<Cell> row;
        row.reserve(raw.size());
        for (std::size_t c = 0; c < raw.size(); ++c) row.push_back(ingest::make_cell(raw[c], t.columns[c].kind));
        t.rows.push_back(std::move(row));
      }
      db.tables.push_back(std::move(t));
    }
    return db;
  });
}

json to_json(const Query& q) {
  return versioned({{"id", q.id},
                    {"database_id", q.database_id},
                    {"role", q.role},
                    {"intention", q.intention},
                    {"status", std::string(to_string(q.status))},
                    {"reason", std::string(to_string(q.reason))},
                    {"text", q.text}});
}

template <>
Query from_json<Query>(const json& j) {
  return decode([&] {
    check_version(j);
    Query q;
    q.id = get<std::string>(j, "id");
    q.database_id = get<std::string>(j, "database_id");
    q.role = get<std::string>(j, "role");
    q.intention = get<std::string>(j, "intention");
    q.status = query_status_from_string(get<std::string>(j, "status"));
    q.reason = rejection_reason_from_string(get<std::string>(j, "reason"));
    q.text = get<std::string>(j, "text");
    return q;
  });
}

json to_json(const Trajectory& t) {
  json turns = json::array();
  for (const auto& turn : t.turns) {
    const auto& o = turn.observation;
    turns.push_back({{"index", turn.index},
                     {"action_code", turn.action_code},
                     {"observation",
                      {{"stdout", o.stdout_text},
                       {"stderr", o.stderr_text},
                       {"ok", o.ok},
                       {"truncated", o.truncated},
                       {"wall_time", o.wall_time}}},
                     {"resample_count", turn.resample_count},
                     {"corrections_used", turn.corrections_used}});
  }
  return versioned({{"task_id", t.task_id},
                    {"turns", std::move(turns)},
                    {"termination", std::string(to_string(t.termination))},
                    {"final_answer", t.final_answer ? to_json(*t.final_answer) : json(nullptr)},
                    {"answer_absent_reason", t.answer_absent_reason}});
}

template <>
Trajectory from_json<Trajectory>(const json& j) {
  return decode([&] {
    check_version(j);
    Trajectory t;
    t.task_id = get<std::string>(j, "task_id");
    for (const auto& tj : field(j, "turns")) {
      Turn turn;
      turn.index = get<int>(tj, "index");
      turn.action_code = get<std::string>(tj, "action_code");
      const json& oj = field(tj, "observation");
      turn.observation.stdout_text = get<std::string>(oj, "stdout");
      turn.observation.stderr_text = get<std::string>(oj, "stderr");
      turn.observation.ok = get<bool>(oj, "ok");
      turn.observation.truncated = get<bool>(oj, "truncated");
      turn.observation.wall_time = get<double>(oj, "wall_time");
      turn.resample_count = get<int>(tj, "resample_count");
      turn.corrections_used = get<int>(tj, "corrections_used");
      t.turns.push_back(std::move(turn));
    }
    t.termination = termination_from_string(get<std::string>(j, "termination"));
    const json& fa = field(j, "final_answer");
    if (!fa.is_null()) t.final_answer = from_json<Analysis>(fa);
    t.answer_absent_reason = get<std::string>(j, "answer_absent_reason");
    return t;
  });
}

json to_json(const AnswerRecord& a) {
  json prov = json::array();
  for (const auto& p : a.provenance)
    prov.push_back({{"section", std::string(to_string(p.section))},
                    {"index", p.index},
                    {"from", ref_json(p.from)},
                    {"original_text", p.original_text}});
  return versioned({{"id", a.id},
                    {"task_id", a.task_id},
                    {"source", a.source},
                    {"analysis", to_json(a.analysis)},
                    {"annotator", a.annotator},
                    {"provenance", std::move(prov)}});
}

template <>
AnswerRecord from_json<AnswerRecord>(const json& j) {
  return decode([&] {
    check_version(j);
    AnswerRecord a;
    a.id = get<std::string>(j, "id");
    a.task_id = get<std::string>(j, "task_id");
    a.source = get<std::string>(j, "source");
    a.analysis = from_json<Analysis>(field(j, "analysis"));
    a.annotator = get<std::string>(j, "annotator");
    for (const auto& pj : field(j, "provenance"))
      a.provenance.push_back({section_from_string(get<std::string>(pj, "section")), get<int>(pj, "index"),
                              ref_from(field(pj, "from")), get<std::string>(pj, "original_text")});
    return a;
  });
}

json to_json(const BulletRating& r) {
  json j = ref_json(r.bullet);
  j["rating"] = static_cast<int>(r.rating);
  j["rater"] = r.rater;
  return versioned(std::move(j));
}

template <>
BulletRating from_json<BulletRating>(const json& j) {
  return decode([&] {
    check_version(j);
    int rating = get<int>(j, "rating");
    if (rating < 0 || rating > 2) throw RecordError(fmt::format("rating {} outside 0..2", rating));
    return BulletRating{ref_from(j), static_cast<Helpfulness>(rating), get<std::string>(j, "rater")};
  });
}

json to_json(const Judgment& j) {
  return versioned({{"task_id", j.task_id},
                    {"left_id", j.left_id},
                    {"right_id", j.right_id},
                    {"choice", std::string(to_string(j.choice))},
                    {"judge", j.judge},
                    {"order_seed", j.order_seed},
                    {"rationale", j.rationale}});
}

template <>
Judgment from_json<Judgment>(const json& j) {
  return decode([&] {
    check_version(j);
    Judgment out;
    out.task_id = get<std::string>(j, "task_id");
    out.left_id = get<std::string>(j, "left_id");
    out.right_id = get<std::string>(j, "right_id");
    out.choice = choice_from_string(get<std::string>(j, "choice"));
    out.judge = get<std::string>(j, "judge");
    out.order_seed = get<std::int64_t>(j, "order_seed");
    out.rationale = get<std::string>(j, "rationale");
    return out;
  });
}

json to_json(const reward::PreferencePair& p) {
  return versioned({{"task_id", p.task_id},
                    {"better", p.better},
                    {"worse", p.worse},
                    {"source", std::string(reward::to_string(p.source))},
                    {"better_index", p.better_index},
                    {"worse_index", p.worse_index},
                    {"judge", p.judge}});
}

template <>
reward::PreferencePair from_json<reward::PreferencePair>(const json& j) {
  return decode([&] {
    check_version(j);
    reward::PreferencePair p;
    p.task_id = get<std::string>(j, "task_id");
    p.better = get<std::string>(j, "better");
    p.worse = get<std::string>(j, "worse");
    p.source = reward::pair_source_from_string(get<std::string>(j, "source"));
    p.better_index = get<int>(j, "better_index");
    p.worse_index = get<int>(j, "worse_index");
    p.judge = get<std::string>(j, "judge");
    return p;
  });
}

json to_json(const QueryDecision& d) {
  return versioned({{"query_id", d.query_id},
                    {"status", std::string(to_string(d.status))},
                    {"reason", std::string(to_string(d.reason))},
                    {"annotator", d.annotator}});
}

template <>
QueryDecision from_json<QueryDecision>(const json& j) {
  return decode([&] {
    check_version(j);
    return QueryDecision{get<std::string>(j, "query_id"), query_status_from_string(get<std::string>(j, "status")),
                         rejection_reason_from_string(get<std::string>(j, "reason")),
                         get<std::string>(j, "annotator")};
  });
}

// ---------------------------------------------------------------------------

JsonlWriter::JsonlWriter(const fs::path& path) : path_(path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::app);
  if (!out_) throw std::runtime_error(fmt::format("cannot open {} for appending", path.string()));
}

void JsonlWriter::write(const json& j) {
  std::string line = j.dump(-1, ' ', false, json::error_handler_t::replace);
  line.push_back('\n');
  write_raw(line);
}

void JsonlWriter::write_raw(std::string_view lines) {
  std::lock_guard lock(mu_);
  out_.write(lines.data(), static_cast<std::streamsize>(lines.size()));
  out_.flush();
  if (!out_) throw std::runtime_error(fmt::format("write to {} failed", path_.string()));
}

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

JsonlContents read_jsonl(const fs::path& path) {
  JsonlContents out;
  if (!fs::exists(path)) return out;
  const std::string data = slurp(path);
  std::size_t pos = 0;
  int lineno = 0;
  while (pos < data.size()) {
    std::size_t nl = data.find('\n', pos);
    bool terminated = nl != std::string::npos;
    std::string_view line(data.data() + pos, (terminated ? nl : data.size()) - pos);
    pos = terminated ? nl + 1 : data.size();
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.lines.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      if (!terminated) {
        out.truncated_tail = true;
        spdlog::warn("{}: ignoring truncated last line", path.string());
        break;
      }
      throw RecordError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

bool repair_jsonl_tail(const fs::path& path) {
  if (!fs::exists(path)) return false;
  const std::string data = slurp(path);
  if (data.empty() || data.back() == '\n') return false;
  std::size_t last_nl = data.rfind('\n');
  std::size_t start = last_nl == std::string::npos ? 0 : last_nl + 1;
  bool parses = true;
  try {
    json probe = json::parse(std::string_view(data).substr(start));
    (void)probe;
  } catch (const json::parse_error&) {
    parses = false;
  }
  if (parses) {
    std::ofstream(path, std::ios::binary | std::ios::app) << '\n';
    return false;
  }
  fs::resize_file(path, start);
  spdlog::warn("{}: dropped {} bytes of a truncated last line", path.string(), data.size() - start);
  return true;
}

void write_json_atomic(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += fmt::format(".tmp.{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::pair<TaskStatus, std::string_view> kTaskStatuses[] = {
    {TaskStatus::Pending, "pending"},
    {TaskStatus::Running, "running"},
    {TaskStatus::Done, "done"},
    {TaskStatus::Failed, "failed"},
};
}  // namespace

std::string_view to_string(TaskStatus s) {
  for (auto& [v, n] : kTaskStatuses)
    if (v == s) return n;
  return "?";
}

TaskStatus task_status_from_string(std::string_view s) {
  for (auto& [v, n] : kTaskStatuses)
    if (n == s) return v;
  throw std::invalid_argument(fmt::format("unknown task status: '{}'", s));
}

bool RunManifest::needs_run(const std::string& task_id) const {
  auto it = tasks.find(task_id);
  return it == tasks.end() || it->second != TaskStatus::Done;
}

std::size_t RunManifest::count(TaskStatus s) const {
  std::size_t n = 0;
  for (const auto& [id, st] : tasks) n += st == s;
  return n;
}

json to_json(const RunManifest& m) {
  json tasks = json::object();
  for (const auto& [id, s] : m.tasks) tasks[id] = std::string(to_string(s));
  return versioned({{"run_id", m.run_id},
                    {"command", m.command},
                    {"config", m.config},
                    {"started_at", m.started_at},
                    {"finished_at", m.finished_at},
                    {"tasks", std::move(tasks)}});
}

template <>
RunManifest from_json<RunManifest>(const json& j) {
  return decode([&] {
    check_version(j);
    RunManifest m;
    m.run_id = get<std::string>(j, "run_id");
    m.command = get<std::string>(j, "command");
    m.config = field(j, "config");
    m.started_at = get<std::string>(j, "started_at");
    m.finished_at = get<std::string>(j, "finished_at");
    for (const auto& [id, s] : field(j, "tasks").items()) m.tasks[id] = task_status_from_string(s.get<std::string>());
    return m;
  });
}

std::string utc_now_iso8601() {
  std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string make_run_id() {
  std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  std::random_device rd;
  return fmt::format("{}-{:06x}", buf, rd() & 0xffffffu);
}

RunDir::RunDir(fs::path path, RunManifest m) : path_(std::move(path)), manifest_(std::move(m)) {}

RunDir RunDir::open(const fs::path& runs_root, const std::string& run_id, const std::string& command,
                    const json& config, const char* done_file, const char* done_key) {
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..")
    throw std::invalid_argument(fmt::format("invalid run id '{}'", run_id));
  fs::path dir = runs_root / run_id;
  fs::create_directories(dir);
  RunManifest m;
  fs::path mpath = dir / files::kManifest;
  if (fs::exists(mpath)) {
    json j;
    try {
      j = json::parse(slurp(mpath));
    } catch (const json::parse_error& e) {
      throw RecordError(fmt::format("{}: {}", mpath.string(), e.what()));
    }
    m = from_json<RunManifest>(j);
    if (m.command != command)
      throw std::invalid_argument(fmt::format("run '{}' belongs to command '{}', not '{}'", run_id, m.command, command));
    m.finished_at.clear();
    for (auto& [id, s] : m.tasks)
      if (s == TaskStatus::Running) s = TaskStatus::Pending;
  } else {
    m.run_id = run_id;
    m.command = command;
    m.config = config;
    m.started_at = utc_now_iso8601();
  }
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".jsonl") repair_jsonl_tail(entry.path());
  for (const auto& line : read_jsonl(dir / done_file).lines)
    if (line.is_object() && line.contains(done_key) && line[done_key].is_string())
      m.tasks[line[done_key].get<std::string>()] = TaskStatus::Done;
  RunDir rd(dir, std::move(m));
  std::lock_guard lock(*rd.mu_);
  rd.save_locked();
  return rd;
}

RunManifest RunDir::manifest() const {
  std::lock_guard lock(*mu_);
  return manifest_;
}

void RunDir::register_tasks(const std::vector<std::string>& task_ids) {
  std::lock_guard lock(*mu_);
  for (const auto& id : task_ids) manifest_.tasks.try_emplace(id, TaskStatus::Pending);
  save_locked();
}

void RunDir::set_status(const std::string& task_id, TaskStatus s) {
  std::lock_guard lock(*mu_);
  manifest_.tasks[task_id] = s;
  save_locked();
}

void RunDir::finish() {
  std::lock_guard lock(*mu_);
  manifest_.finished_at = utc_now_iso8601();
  save_locked();
}

void RunDir::save_locked() const { write_json_atomic(path_ / files::kManifest, to_json(manifest_)); }

}  // namespace dabench::store
