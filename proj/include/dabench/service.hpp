#pragma once

// Annotation service: task queues with leases for the four human stages
// (query filtering, bullet rating, refinement, pairwise judging), submission
// validation, inter-annotator agreement and JSONL export. All durable state
// is JSONL in the state dir; leases live in memory only.
//
// AnnotationService is transport-free; HttpService exposes it over HTTP.
// Endpoint and field names are listed in docs/api.md.

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabench/core.hpp"
#include "dabench/records.hpp"

namespace dabench::service {

inline constexpr const char* kStateDirEnv = "DABENCH_STATE_DIR";
inline constexpr const char* kAnnotatorHeader = "X-Annotator-Id";
inline constexpr std::chrono::minutes kDefaultLease{10};

// status is the HTTP status to answer with.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string message) : std::runtime_error(std::move(message)), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

enum class TaskKind { QueryFilter, BulletRate, Refine, Pairwise };
std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);  // throws ApiError(400)

// Candidate bullets preselected for a refinement: every very-helpful bullet
// of a section, deduplicated by normalized text, then borderline bullets
// offered as backfill while the section has fewer than
// Analysis::kMinGoldBullets.
struct RefinementDraft {
  struct Candidate {
    BulletRef ref;
    std::string text;
    int rating = 0;  // lower median over raters
    bool operator==(const Candidate&) const = default;
  };
  std::vector<Candidate> findings;
  std::vector<Candidate> suggestions;
  std::vector<Candidate> backfill_findings;
  std::vector<Candidate> backfill_suggestions;
};

struct RatedAnswer {
  store::AnswerRecord answer;
  // (section, index) -> median rating
  std::map<std::pair<Section, int>, int> ratings;
};

RefinementDraft draft_refinement(const std::vector<RatedAnswer>& candidates);

struct ServiceOptions {
  std::chrono::milliseconds lease = kDefaultLease;
  int annotations_per_item = 2;    // items leave the queue after this many submissions
  std::size_t max_refine_candidates = 3;  // answers offered per refinement
  std::function<std::chrono::system_clock::time_point()> clock = [] { return std::chrono::system_clock::now(); };
  std::uint64_t seed = std::random_device{}();  // lease tokens and pairwise order
};

class AnnotationService {
 public:
  // Loads every JSONL file in state_dir. Throws std::invalid_argument when
  // the directory does not exist.
  explicit AnnotationService(std::filesystem::path state_dir, ServiceOptions options = {});

  // {"kind", "task": null} or {"kind", "task": {"item_id", "lease_token",
  // "lease_expires_at", "payload"}}.
  nlohmann::json next_task(TaskKind kind, const std::string& annotator);
  // Returns {"ok": true, "record": ...}; ApiError 409 / 422 / 400.
  nlohmann::json submit(const std::string& annotator, const nlohmann::json& body);
  nlohmann::json agreement(TaskKind kind) const;
  // JSONL body for one export name (see export_names()).
  std::string export_jsonl(const std::string& name) const;
  static std::vector<std::string> export_names();

  const std::filesystem::path& state_dir() const { return dir_; }

 private:
  struct Lease {
    std::string annotator;
    std::string token;
    std::chrono::system_clock::time_point expires;
    std::int64_t order_seed = 0;
  };
  struct Pair {
    std::string id;
    std::string task_id;
    std::string a;  // answer ids, a < b
    std::string b;
  };
  using Key = std::pair<TaskKind, std::string>;  // (kind, item id)

  void load();
  std::vector<std::string> items_locked(TaskKind kind) const;
  nlohmann::json payload_locked(TaskKind kind, const std::string& item, const Lease& lease) const;
  std::vector<RatedAnswer> rated_candidates_locked(const std::string& task_id) const;
  const Lease& check_lease_locked(TaskKind kind, const std::string& item, const std::string& annotator,
                                  const nlohmann::json& body) const;
  std::string token_locked();
  nlohmann::json task_context_locked(const std::string& task_id) const;
  std::map<std::string, std::map<std::string, std::string>> labels_locked(TaskKind kind) const;

  std::filesystem::path dir_;
  ServiceOptions opt_;
  mutable std::mutex mu_;
  std::mt19937_64 rng_;

  std::vector<Database> databases_;
  std::vector<Query> queries_;
  std::vector<store::AnswerRecord> candidates_;  // not refined, not gold
  std::vector<Pair> pairs_;
  std::vector<store::QueryDecision> decisions_;
  std::vector<BulletRating> ratings_;
  std::vector<store::AnswerRecord> refined_;
  std::vector<Judgment> judgments_;

  std::map<Key, std::set<std::string>> submitted_;  // annotators per item
  std::map<Key, std::vector<Lease>> leases_;

  std::unique_ptr<store::JsonlWriter> decisions_out_;
  std::unique_ptr<store::JsonlWriter> ratings_out_;
  std::unique_ptr<store::JsonlWriter> answers_out_;
  std::unique_ptr<store::JsonlWriter> judgments_out_;
};

// GET /api/tasks, POST /api/judgments, GET /api/agreement, GET /api/export
// and static files from static_dir when given.
class HttpService {
 public:
  HttpService(std::shared_ptr<AnnotationService> core, std::optional<std::filesystem::path> static_dir = {});
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  // Binds; port 0 picks a free one. Returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dabench::service
