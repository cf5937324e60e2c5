#include "dabench/llm.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "dabench/text.hpp"

using nlohmann::json;

namespace dabench::llm {

std::string_view to_string(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "?";
}

Role role_from_string(std::string_view s) {
  if (s == "system") return Role::System;
  if (s == "user") return Role::User;
  if (s == "assistant") return Role::Assistant;
  throw std::invalid_argument(fmt::format("unknown role: '{}'", s));
}

Conversation& Conversation::add(Role role, std::string content) {
  messages.push_back({role, std::move(content)});
  return *this;
}

Conversation Conversation::with(Role role, std::string content) const {
  Conversation copy = *this;
  copy.add(role, std::move(content));
  return copy;
}

const Message* Conversation::last_user() const {
  for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
    if (it->role == Role::User) return &*it;
  }
  return nullptr;
}

std::vector<std::string> Conversation::violations() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (messages[i].content.empty()) out.push_back(fmt::format("message {} is empty", i));
    if (i > 0 && messages[i].role == Role::Assistant && messages[i - 1].role == Role::Assistant) {
      out.push_back(fmt::format("messages {} and {} are consecutive assistant turns", i - 1, i));
    }
    if (messages[i].role == Role::System && i != 0) {
      out.push_back(fmt::format("system message at position {}", i));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::string name, std::vector<Entry> entries) : name_(std::move(name)) {
  for (auto& e : entries) push(std::move(e));
}

ScriptedBackend::ScriptedBackend(std::string name, const std::vector<std::string>& responses)
    : name_(std::move(name)) {
  for (const auto& r : responses) push({r, {}, false});
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_file(std::string name, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open script file {}", path));
  auto backend = std::make_shared<ScriptedBackend>(std::move(name));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      auto j = json::parse(line);
      backend->push({j.at("response").get<std::string>(), j.value("match", std::string{}),
                     j.value("repeat", false)});
    } catch (const json::exception& e) {
      throw std::runtime_error(fmt::format("{}:{}: bad script entry: {}", path, lineno, e.what()));
    }
  }
  return backend;
}

void ScriptedBackend::push(Entry e) {
  Compiled c{std::move(e), std::nullopt};
  if (!c.entry.pattern.empty()) c.re.emplace(c.entry.pattern, std::regex::ECMAScript);
  std::lock_guard lock(mu_);
  queue_.push_back(std::move(c));
}

std::size_t ScriptedBackend::remaining() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

std::size_t ScriptedBackend::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::string ScriptedBackend::complete(const Conversation& conversation, const GenerationParams&) {
  const auto* last = conversation.last_user();
  const std::string empty;
  const std::string& subject = last ? last->content : empty;
  std::lock_guard lock(mu_);
  ++calls_;
  for (auto it = queue_.begin(); it != queue_.end(); ++it) {
    if (it->re && !std::regex_search(subject, *it->re)) continue;
    std::string reply = it->entry.response;
    if (!it->entry.repeat) queue_.erase(it);
    return reply;
  }
  throw BackendUnavailable(fmt::format("scripted backend '{}': queue empty", name_));
}

// ---------------------------------------------------------------------------

TokenBucket::TokenBucket(double per_minute)
    : capacity_(per_minute > 0 ? std::max(1.0, per_minute) : 0),
      rate_per_sec_(per_minute / 60.0),
      tokens_(capacity_),
      last_(std::chrono::steady_clock::now()) {}

void TokenBucket::refill(std::chrono::steady_clock::time_point now) {
  std::chrono::duration<double> dt = now - last_;
  tokens_ = std::min(capacity_, tokens_ + dt.count() * rate_per_sec_);
  last_ = now;
}

void TokenBucket::acquire() {
  if (capacity_ <= 0) return;
  for (;;) {
    std::chrono::duration<double> wait{0};
    {
      std::lock_guard lock(mu_);
      refill(std::chrono::steady_clock::now());
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait = std::chrono::duration<double>((1.0 - tokens_) / rate_per_sec_);
    }
    std::this_thread::sleep_for(wait);
  }
}

double TokenBucket::available() const {
  std::lock_guard lock(mu_);
  return tokens_;
}

// ---------------------------------------------------------------------------

namespace {

std::pair<std::string, std::string> split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

bool transient_status(int status) { return status == 429 || status >= 500; }

}  // namespace

HttpResult post_json_with_retry(const std::string& url, const std::map<std::string, std::string>& headers,
                                const std::string& body, std::chrono::seconds timeout,
                                const RetryPolicy& retry, TokenBucket* limiter, int* attempts_out) {
  auto [base, path] = split_url(url);
  httplib::Headers hdrs;
  for (const auto& [k, v] : headers) hdrs.emplace(k, v);
  auto backoff = retry.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt <= retry.max_retries; ++attempt) {
    if (attempts_out) *attempts_out = attempt + 1;
    if (limiter) limiter->acquire();
    httplib::Client client(base);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(path, hdrs, body, "application/json");
    if (res && res->status >= 200 && res->status < 300) return {res->status, res->body};
    if (res && !transient_status(res->status)) {
      throw BadResponse(fmt::format("POST {} returned HTTP {}: {}", url, res->status,
                                    res->body.substr(0, 500)));
    }
    last_error = res ? fmt::format("HTTP {}", res->status) : httplib::to_string(res.error());
    if (attempt == retry.max_retries) break;
    spdlog::warn("POST {} failed ({}), retrying in {} ms", url, last_error, backoff.count());
    std::this_thread::sleep_for(backoff);
    backoff = std::min(retry.max_backoff, std::chrono::milliseconds(static_cast<std::int64_t>(
                                              static_cast<double>(backoff.count()) * retry.multiplier)));
  }
  throw BackendUnavailable(
      fmt::format("POST {} failed after {} attempts: {}", url, retry.max_retries + 1, last_error));
}

std::string_view to_string(BackendKind k) {
  switch (k) {
    case BackendKind::OpenAI: return "openai";
    case BackendKind::Anthropic: return "anthropic";
    case BackendKind::Scripted: return "scripted";
  }
  return "?";
}

BackendKind backend_kind_from_string(std::string_view s) {
  if (s == "openai") return BackendKind::OpenAI;
  if (s == "anthropic") return BackendKind::Anthropic;
  if (s == "scripted") return BackendKind::Scripted;
  throw std::invalid_argument(fmt::format("unknown backend kind: '{}'", s));
}

std::string BackendSpec::resolved_key_env() const {
  if (!api_key_env.empty()) return api_key_env;
  std::string env;
  for (char c : name) env.push_back(std::isalnum(static_cast<unsigned char>(c))
                                        ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                                        : '_');
  return env + "_API_KEY";
}

HttpBackend::HttpBackend(BackendSpec spec) : spec_(std::move(spec)), limiter_(spec_.rpm) {}

json HttpBackend::request_body(const Conversation& conversation, const GenerationParams& params) const {
  json body;
  body["model"] = spec_.model_name;
  body["max_tokens"] = params.max_tokens;
  body["temperature"] = params.temperature;
  body["top_p"] = params.nucleus_p;
  json messages = json::array();
  if (spec_.kind == BackendKind::Anthropic) {
    for (const auto& m : conversation.messages) {
      if (m.role == Role::System) {
        body["system"] = m.content;
      } else {
        messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
      }
    }
  } else {
    for (const auto& m : conversation.messages) {
      messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    }
    if (params.seed) body["seed"] = *params.seed;
  }
  body["messages"] = std::move(messages);
  return body;
}

std::string HttpBackend::parse_response(const std::string& body) const {
  try {
    auto j = json::parse(body);
    std::string content;
    std::int64_t in_tokens = -1, out_tokens = -1;
    if (spec_.kind == BackendKind::Anthropic) {
      for (const auto& block : j.at("content")) {
        if (block.value("type", std::string{"text"}) == "text") content += block.at("text").get<std::string>();
      }
      if (j.contains("usage")) {
        in_tokens = j["usage"].value("input_tokens", -1);
        out_tokens = j["usage"].value("output_tokens", -1);
      }
    } else {
      const auto& msg = j.at("choices").at(0).at("message");
      if (msg.at("content").is_null()) throw BadResponse("null content in completion");
      content = msg.at("content").get<std::string>();
      if (j.contains("usage")) {
        in_tokens = j["usage"].value("prompt_tokens", -1);
        out_tokens = j["usage"].value("completion_tokens", -1);
      }
    }
    if (in_tokens >= 0) spdlog::debug("{}: {} prompt tokens, {} completion tokens", spec_.name, in_tokens, out_tokens);
    return content;
  } catch (const json::exception& e) {
    throw BadResponse(fmt::format("{}: malformed completion payload: {}", spec_.name, e.what()));
  }
}

std::string HttpBackend::complete(const Conversation& conversation, const GenerationParams& params) {
  std::map<std::string, std::string> headers;
  const char* key = std::getenv(spec_.resolved_key_env().c_str());
  std::string url = spec_.endpoint;
  while (!url.empty() && url.back() == '/') url.pop_back();
  if (spec_.kind == BackendKind::Anthropic) {
    url += "/messages";
    headers["anthropic-version"] = "2023-06-01";
    if (key) headers["x-api-key"] = key;
  } else {
    url += "/chat/completions";
    if (key) headers["Authorization"] = fmt::format("Bearer {}", key);
  }
  int attempts = 0;
  auto res = post_json_with_retry(url, headers, request_body(conversation, params).dump(), spec_.timeout,
                                  spec_.retry, &limiter_, &attempts);
  last_attempts_ = attempts;
  return parse_response(res.body);
}

BackendSpec backend_spec_from_json(const json& j) {
  BackendSpec s;
  s.name = j.at("name").get<std::string>();
  s.kind = backend_kind_from_string(j.at("kind").get<std::string>());
  s.endpoint = j.value("endpoint", std::string{});
  s.model_name = j.value("model_name", std::string{});
  s.rpm = j.value("rpm", 0.0);
  s.api_key_env = j.value("api_key_env", std::string{});
  s.script = j.value("script", std::string{});
  s.timeout = std::chrono::seconds(j.value("timeout_s", 120));
  if (j.contains("max_retries")) s.retry.max_retries = j["max_retries"].get<int>();
  if (j.contains("backoff_ms")) s.retry.initial_backoff = std::chrono::milliseconds(j["backoff_ms"].get<int>());
  if (s.kind == BackendKind::Scripted && s.script.empty()) {
    throw std::invalid_argument(fmt::format("scripted backend '{}' needs a script path", s.name));
  }
  if (s.kind != BackendKind::Scripted && s.endpoint.empty()) {
    throw std::invalid_argument(fmt::format("backend '{}' needs an endpoint", s.name));
  }
  return s;
}

json to_json(const BackendSpec& s) {
  return {{"name", s.name},
          {"kind", to_string(s.kind)},
          {"endpoint", s.endpoint},
          {"model_name", s.model_name},
          {"rpm", s.rpm},
          {"api_key_env", s.resolved_key_env()},
          {"script", s.script},
          {"timeout_s", s.timeout.count()}};
}

std::shared_ptr<Backend> make_backend(const BackendSpec& spec) {
  if (spec.kind == BackendKind::Scripted) return ScriptedBackend::from_file(spec.name, spec.script);
  return std::make_shared<HttpBackend>(spec);
}

BackendRegistry::BackendRegistry(const json& config) {
  if (!config.contains("backends")) return;
  for (const auto& b : config.at("backends")) add_spec(backend_spec_from_json(b));
}

void BackendRegistry::add(std::shared_ptr<Backend> backend) {
  std::lock_guard lock(mu_);
  live_[backend->name()] = std::move(backend);
}

void BackendRegistry::add_spec(BackendSpec spec) {
  std::lock_guard lock(mu_);
  specs_.push_back(std::move(spec));
}

bool BackendRegistry::contains(const std::string& name) const {
  std::lock_guard lock(mu_);
  if (live_.count(name)) return true;
  return std::any_of(specs_.begin(), specs_.end(), [&](const auto& s) { return s.name == name; });
}

std::shared_ptr<Backend> BackendRegistry::get(const std::string& name) {
  std::lock_guard lock(mu_);
  if (auto it = live_.find(name); it != live_.end()) return it->second;
  for (const auto& s : specs_) {
    if (s.name == name) {
      auto b = make_backend(s);
      live_[name] = b;
      return b;
    }
  }
  throw std::invalid_argument(fmt::format("no backend named '{}' in config", name));
}

}  // namespace dabench::llm
