#pragma once

// Sandbox sessions. Each session owns one harness child process that holds a
// persistent interpreter namespace with the database tables preloaded.
//
// Wire protocol: newline-delimited JSON over the child's stdin/stdout.
//   request   {"id": N, "type": "handshake"}
//             {"id": N, "type": "exec", "code": "..."}
//   response  {"id": N, "stdout": "...", "stderr": "...", "ok": bool,
//              "wall_ms": number, "truncated": bool}
//   handshake responses additionally carry "variables": [...] and
//   optionally "errors": [...] naming tables that failed to load.
// The child is launched as: <harness...> <scratch_dir> --stdout-cap <bytes>

#include <sys/types.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dabench/core.hpp"

namespace dabench::exec {

class ExecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class SpawnFailure : public ExecError {
 public:
  using ExecError::ExecError;
};
class HandshakeTimeout : public ExecError {
 public:
  using ExecError::ExecError;
};
class SessionDead : public ExecError {
 public:
  using ExecError::ExecError;
};

inline constexpr std::size_t kDefaultStdoutCapBytes = 65536;

// stderr of the observation returned after the child was killed and
// respawned; the namespace is fresh afterwards.
inline constexpr std::string_view kTimeoutStderr = "timeout";
inline constexpr std::string_view kCrashStderr = "harness exited unexpectedly";
inline bool lost_namespace(const Observation& obs) {
  return !obs.ok && (obs.stderr_text == kTimeoutStderr || obs.stderr_text == kCrashStderr);
}

struct Limits {
  // argv prefix of the harness; the scratch dir and flags are appended.
  std::vector<std::string> harness_command;
  std::chrono::milliseconds handshake_timeout{30000};
  std::chrono::milliseconds exec_timeout{30000};
  std::size_t stdout_cap_bytes = kDefaultStdoutCapBytes;
  // Empty: $DABENCH_SCRATCH_ROOT, else the system temp directory.
  std::filesystem::path scratch_root;

  std::filesystem::path resolved_scratch_root() const;
};

struct Handshake {
  std::vector<std::string> variables;
  std::vector<std::string> errors;
  int generation = 0;  // 0 for the first process, +1 per respawn
  bool fresh_namespace() const { return generation > 0; }
};

enum class SessionState { Live, Dead };

// What the agent needs from an execution environment.
class CodeExecutor {
 public:
  virtual ~CodeExecutor() = default;
  virtual Observation exec_step(std::string_view code) = 0;
  virtual std::vector<std::string> variables() const = 0;
};

// A live harness process. Confined to one thread at a time.
class Session final : public CodeExecutor {
 public:
  static std::unique_ptr<Session> open(const Database& db, const Limits& limits, std::string session_id = {});
  ~Session() override;
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  Observation exec_step(std::string_view code) override;
  Observation exec_step(std::string_view code, std::chrono::milliseconds timeout);
  std::vector<std::string> variables() const override { return handshake_.variables; }

  // Reaps the child and removes the scratch dir. Idempotent.
  void close();

  const std::string& id() const { return id_; }
  const std::string& database_id() const { return database_id_; }
  SessionState state() const { return state_; }
  int exec_count() const { return exec_count_; }
  const Handshake& handshake() const { return handshake_; }
  const std::filesystem::path& scratch_dir() const { return scratch_dir_; }
  pid_t pid() const;

 private:
  class Process;
  Session(std::string id, std::string database_id, Limits limits, std::filesystem::path scratch);
  void spawn();
  void kill_child();
  std::optional<std::string> read_line(std::chrono::steady_clock::time_point deadline);

  std::string id_;
  std::string database_id_;
  Limits limits_;
  std::filesystem::path scratch_dir_;
  std::unique_ptr<Process> proc_;
  SessionState state_ = SessionState::Live;
  int exec_count_ = 0;
  int spawns_ = 0;
  std::int64_t next_request_id_ = 1;
  Handshake handshake_;
  std::string read_buffer_;
};

// Hands out sessions with process-unique ids; safe to call from many threads.
class SessionManager {
 public:
  explicit SessionManager(Limits limits) : limits_(std::move(limits)) {}
  std::unique_ptr<Session> open(const Database& db);
  const Limits& limits() const { return limits_; }
  int opened() const { return opened_; }

 private:
  Limits limits_;
  std::atomic<int> opened_{0};
};

}  // namespace dabench::exec
