#pragma once

// Chat-completion backends. Every backend is a shareable handle whose
// complete() may be called from many threads at once.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dabench::llm {

enum class Role { System, User, Assistant };
std::string_view to_string(Role r);
Role role_from_string(std::string_view s);

struct Message {
  Role role = Role::User;
  std::string content;
};

struct Conversation {
  std::vector<Message> messages;

  Conversation& add(Role role, std::string content);
  // Copy with one more message; the receiver is left untouched.
  Conversation with(Role role, std::string content) const;
  const Message* last_user() const;
  std::vector<std::string> violations() const;
};

struct GenerationParams {
  double temperature = 1.0;
  double nucleus_p = 0.9;
  int max_tokens = 2048;
  std::optional<std::int64_t> seed;
};

class BackendUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadResponse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual const std::string& name() const = 0;
  // Returns the assistant message text. Never mutates the conversation.
  virtual std::string complete(const Conversation& conversation, const GenerationParams& params) = 0;
};

// Replies from an ordered queue. An entry with a pattern is only eligible
// when the pattern matches (std::regex_search) the last user message; the
// first eligible entry is consumed. Entries marked repeat are never consumed.
class ScriptedBackend final : public Backend {
 public:
  struct Entry {
    std::string response;
    std::string pattern;  // empty matches anything
    bool repeat = false;
  };

  explicit ScriptedBackend(std::string name, std::vector<Entry> entries = {});
  ScriptedBackend(std::string name, const std::vector<std::string>& responses);

  // Reads a JSONL script: {"response": ..., "match": optional regex, "repeat": optional bool}.
  static std::shared_ptr<ScriptedBackend> from_file(std::string name, const std::string& path);

  const std::string& name() const override { return name_; }
  std::string complete(const Conversation& conversation, const GenerationParams& params) override;

  void push(Entry e);
  std::size_t remaining() const;
  std::size_t calls() const;

 private:
  struct Compiled {
    Entry entry;
    std::optional<std::regex> re;
  };
  std::string name_;
  mutable std::mutex mu_;
  std::vector<Compiled> queue_;
  std::size_t calls_ = 0;
};

// Delegates to a callable; used for judges and agents whose reply depends
// on the prompt content.
class CallbackBackend final : public Backend {
 public:
  using Fn = std::function<std::string(const Conversation&, const GenerationParams&)>;
  CallbackBackend(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
  const std::string& name() const override { return name_; }
  std::string complete(const Conversation& c, const GenerationParams& p) override { return fn_(c, p); }

 private:
  std::string name_;
  Fn fn_;
};

// Blocks callers so that at most `per_minute` acquisitions succeed in any
// one-minute window on average. per_minute <= 0 disables limiting.
class TokenBucket {
 public:
  explicit TokenBucket(double per_minute);
  void acquire();
  double available() const;

 private:
  void refill(std::chrono::steady_clock::time_point now);
  double capacity_;
  double rate_per_sec_;
  mutable std::mutex mu_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

struct RetryPolicy {
  int max_retries = 5;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};
};

struct HttpResult {
  int status = 0;
  std::string body;
};

// POST with retries on transport failures, 429 and 5xx. Throws
// BackendUnavailable once retries are exhausted and BadResponse on other
// non-2xx statuses.
HttpResult post_json_with_retry(const std::string& url, const std::map<std::string, std::string>& headers,
                                const std::string& body, std::chrono::seconds timeout,
                                const RetryPolicy& retry, TokenBucket* limiter,
                                int* attempts_out = nullptr);

enum class BackendKind { OpenAI, Anthropic, Scripted };
std::string_view to_string(BackendKind k);
BackendKind backend_kind_from_string(std::string_view s);

struct BackendSpec {
  std::string name;
  BackendKind kind = BackendKind::OpenAI;
  std::string endpoint;     // base URL, e.g. https://api.openai.com/v1
  std::string model_name;
  double rpm = 0;           // requests per minute, 0 = unlimited
  std::string api_key_env;  // defaults to <NAME>_API_KEY
  std::string script;       // scripted backends only: JSONL script path
  std::chrono::seconds timeout{120};
  RetryPolicy retry;

  std::string resolved_key_env() const;
};

// Remote chat-completion backend speaking either the OpenAI or the
// Anthropic messages wire format.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendSpec spec);
  const std::string& name() const override { return spec_.name; }
  std::string complete(const Conversation& conversation, const GenerationParams& params) override;

  // Exposed for tests.
  nlohmann::json request_body(const Conversation& conversation, const GenerationParams& params) const;
  std::string parse_response(const std::string& body) const;
  int last_attempts() const { return last_attempts_; }

 private:
  BackendSpec spec_;
  TokenBucket limiter_;
  std::atomic<int> last_attempts_{0};
};

BackendSpec backend_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackendSpec& spec);

std::shared_ptr<Backend> make_backend(const BackendSpec& spec);

// Backends listed in a config file {"backends": [...]} keyed by name.
class BackendRegistry {
 public:
  BackendRegistry() = default;
  explicit BackendRegistry(const nlohmann::json& config);
  void add(std::shared_ptr<Backend> backend);
  void add_spec(BackendSpec spec);
  std::shared_ptr<Backend> get(const std::string& name);
  bool contains(const std::string& name) const;
  const std::vector<BackendSpec>& specs() const { return specs_; }

 private:
  std::vector<BackendSpec> specs_;
  std::map<std::string, std::shared_ptr<Backend>> live_;
  mutable std::mutex mu_;
};

}  // namespace dabench::llm
