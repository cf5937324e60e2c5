#include "dabench/execution.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "dabench/ingestion.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace dabench::exec {

fs::path Limits::resolved_scratch_root() const {
  if (!scratch_root.empty()) return scratch_root;
  if (const char* env = std::getenv("DABENCH_SCRATCH_ROOT"); env && *env) return env;
  return fs::temp_directory_path();
}

namespace {

std::once_flag g_sigpipe_once;

std::string random_suffix() {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  return fmt::format("{:08x}", static_cast<std::uint32_t>(rng()));
}

bool response_matches(const json& j, std::int64_t id) {
  if (!j.is_object()) return false;
  auto it = j.find("id");
  return it != j.end() && it->is_number_integer() && it->get<std::int64_t>() == id;
}

void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

}  // namespace

class Session::Process {
 public:
  pid_t pid = -1;
  int to_child = -1;
  int from_child = -1;
  bool reaped = false;

  ~Process() { terminate(std::chrono::milliseconds(0)); }

  bool write_all(std::string_view data) {
    while (!data.empty()) {
      auto n = ::write(to_child, data.data(), data.size());
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
  }

  // Closes stdin, gives the child `grace` to exit, then SIGKILLs and reaps.
  void terminate(std::chrono::milliseconds grace) {
    close_fd(to_child);
    if (pid > 0 && !reaped) {
      auto deadline = Clock::now() + grace;
      int status = 0;
      for (;;) {
        auto r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid || (r < 0 && errno != EINTR)) {
          reaped = true;
          break;
        }
        if (Clock::now() >= deadline) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
      }
      if (!reaped) {
        ::kill(pid, SIGKILL);
        while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
        }
        reaped = true;
      }
    }
    close_fd(from_child);
  }
};

Session::Session(std::string id, std::string database_id, Limits limits, fs::path scratch)
    : id_(std::move(id)),
      database_id_(std::move(database_id)),
      limits_(std::move(limits)),
      scratch_dir_(std::move(scratch)) {}

Session::~Session() { close(); }

pid_t Session::pid() const { return proc_ ? proc_->pid : -1; }

std::unique_ptr<Session> Session::open(const Database& db, const Limits& limits, std::string session_id) {
  std::call_once(g_sigpipe_once, [] { ::signal(SIGPIPE, SIG_IGN); });
  if (limits.harness_command.empty()) throw SpawnFailure("no harness command configured");
  if (session_id.empty()) session_id = fmt::format("s{}-{}", ::getpid(), random_suffix());
  auto scratch = limits.resolved_scratch_root() / fmt::format("dabench-{}", session_id);
  std::error_code ec;
  fs::create_directories(scratch, ec);
  if (ec) throw SpawnFailure(fmt::format("cannot create scratch dir {}: {}", scratch.string(), ec.message()));
  std::unique_ptr<Session> s(new Session(session_id, db.id, limits, scratch));
  try {
    for (const auto& t : db.tables) ingest::write_table_csv(t, scratch / (t.name + ".csv"));
    s->spawn();
  } catch (...) {
    s->close();
    throw;
  }
  return s;
}

void Session::spawn() {
  int in_pipe[2], out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw SpawnFailure(fmt::format("pipe: {}", std::strerror(errno)));
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw SpawnFailure(fmt::format("pipe: {}", std::strerror(errno)));
  }
  auto log_path = (scratch_dir_ / "harness.log").string();

  std::vector<std::string> args = limits_.harness_command;
  args.push_back(scratch_dir_.string());
  args.push_back("--stdout-cap");
  args.push_back(std::to_string(limits_.stdout_cap_bytes));
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in_pipe[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out_pipe[1], STDOUT_FILENO);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  posix_spawn_file_actions_addchdir_np(&actions, scratch_dir_.c_str());

  pid_t pid = -1;
  const bool has_slash = args.front().find('/') != std::string::npos;
  int rc = has_slash ? ::posix_spawn(&pid, argv[0], &actions, nullptr, argv.data(), environ)
                     : ::posix_spawnp(&pid, argv[0], &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  if (rc != 0) {
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    throw SpawnFailure(fmt::format("cannot start harness '{}': {}", args.front(), std::strerror(rc)));
  }
  proc_ = std::make_unique<Process>();
  proc_->pid = pid;
  proc_->to_child = in_pipe[1];
  proc_->from_child = out_pipe[0];
  read_buffer_.clear();

  const auto id = next_request_id_++;
  if (!proc_->write_all(json{{"id", id}, {"type", "handshake"}}.dump() + "\n")) {
    kill_child();
    throw SpawnFailure("harness closed its input before the handshake");
  }
  const auto deadline = Clock::now() + limits_.handshake_timeout;
  for (;;) {
    auto line = read_line(deadline);
    if (!line) {
      const bool timed_out = proc_->from_child >= 0;
      kill_child();
      if (timed_out) throw HandshakeTimeout(fmt::format("no handshake within {} ms", limits_.handshake_timeout.count()));
      throw SpawnFailure("harness exited during the handshake; see harness.log");
    }
    json j;
    try {
      j = json::parse(*line);
    } catch (const json::exception&) {
      spdlog::warn("session {}: ignoring non-protocol output: {}", id_, line->substr(0, 200));
      continue;
    }
    if (!response_matches(j, id)) continue;
    Handshake hs;
    hs.generation = spawns_++;
    auto names = [&](const char* key) {
      std::vector<std::string> out;
      if (auto it = j.find(key); it != j.end() && it->is_array())
        for (const auto& v : *it)
          if (v.is_string()) out.push_back(v.get<std::string>());
      return out;
    };
    hs.variables = names("variables");
    hs.errors = names("errors");
    handshake_ = std::move(hs);
    state_ = SessionState::Live;
    return;
  }
}

void Session::kill_child() {
  if (proc_) proc_->terminate(std::chrono::milliseconds(0));
  proc_.reset();
}

std::optional<std::string> Session::read_line(Clock::time_point deadline) {
  for (;;) {
    if (auto nl = read_buffer_.find('\n'); nl != std::string::npos) {
      std::string line = read_buffer_.substr(0, nl);
      read_buffer_.erase(0, nl + 1);
      return line;
    }
    if (!proc_ || proc_->from_child < 0) return std::nullopt;
    auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (remaining.count() <= 0) return std::nullopt;
    pollfd pfd{proc_->from_child, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(std::min<std::int64_t>(remaining.count(), 1000)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      return std::nullopt;
    }
    if (rc == 0) continue;
    char buf[65536];
    auto n = ::read(proc_->from_child, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      close_fd(proc_->from_child);
      return std::nullopt;
    }
    read_buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

Observation Session::exec_step(std::string_view code) { return exec_step(code, limits_.exec_timeout); }

Observation Session::exec_step(std::string_view code, std::chrono::milliseconds timeout) {
  if (state_ == SessionState::Dead || !proc_) throw SessionDead(fmt::format("session {} is dead", id_));
  ++exec_count_;
  const auto id = next_request_id_++;
  const auto start = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };

  auto respawn_with = [&](std::string reason) {
    kill_child();
    try {
      spawn();
    } catch (const ExecError& e) {
      state_ = SessionState::Dead;
      throw SessionDead(fmt::format("session {}: respawn failed after {}: {}", id_, reason, e.what()));
    }
    spdlog::info("session {}: respawned after {} (generation {})", id_, reason, handshake_.generation);
    Observation obs;
    obs.ok = false;
    obs.stderr_text = std::move(reason);
    obs.wall_time = elapsed();
    return obs;
  };

  json req{{"id", id}, {"type", "exec"}, {"code", std::string(code)}};
  if (!proc_->write_all(req.dump(-1, ' ', false, json::error_handler_t::replace) + "\n")) {
    return respawn_with(std::string(kCrashStderr));
  }
  const auto deadline = start + timeout;
  for (;;) {
    auto line = read_line(deadline);
    if (!line) {
      // An open pipe means the deadline passed; a closed one means EOF.
      if (proc_->from_child >= 0) return respawn_with(std::string(kTimeoutStderr));
      return respawn_with(std::string(kCrashStderr));
    }
    json j;
    try {
      j = json::parse(*line);
    } catch (const json::exception&) {
      spdlog::warn("session {}: ignoring non-protocol output: {}", id_, line->substr(0, 200));
      continue;
    }
    if (!response_matches(j, id)) continue;
    Observation obs;
    auto str = [&](const char* key) {
      auto it = j.find(key);
      return it != j.end() && it->is_string() ? it->get<std::string>() : std::string{};
    };
    auto flag = [&](const char* key) {
      auto it = j.find(key);
      return it != j.end() && it->is_boolean() && it->get<bool>();
    };
    obs.stdout_text = str("stdout");
    obs.stderr_text = str("stderr");
    obs.ok = flag("ok");
    obs.truncated = flag("truncated");
    auto wall = j.find("wall_ms");
    obs.wall_time = wall != j.end() && wall->is_number() ? wall->get<double>() / 1000.0 : elapsed();
    if (obs.stdout_text.size() > limits_.stdout_cap_bytes) {
      obs.stdout_text.resize(limits_.stdout_cap_bytes);
      obs.truncated = true;
    }
    if (!obs.ok && obs.stderr_text.empty()) obs.stderr_text = "error (no details reported)";
    return obs;
  }
}

void Session::close() {
  if (proc_) {
    proc_->terminate(std::chrono::milliseconds(200));
    proc_.reset();
  }
  state_ = SessionState::Dead;
  if (!scratch_dir_.empty()) {
    std::error_code ec;
    fs::remove_all(scratch_dir_, ec);
    if (ec) spdlog::warn("session {}: cannot remove {}: {}", id_, scratch_dir_.string(), ec.message());
  }
}

std::unique_ptr<Session> SessionManager::open(const Database& db) {
  auto n = ++opened_;
  return Session::open(db, limits_, fmt::format("s{}-{}-{}", ::getpid(), n, random_suffix()));
}

}  // namespace dabench::exec
