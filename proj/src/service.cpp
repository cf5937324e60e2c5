#include "dabench/service.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <httplib.h>

#include <algorithm>
#include <ctime>
#include <sstream>

#include "dabench/evaluation.hpp"
#include "dabench/ingestion.hpp"
#include "dabench/text.hpp"

namespace dabench::service {

using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::system_clock;

namespace {

constexpr std::pair<TaskKind, std::string_view> kKinds[] = {
    {TaskKind::QueryFilter, "query-filter"},
    {TaskKind::BulletRate, "bullet-rate"},
    {TaskKind::Refine, "refine"},
    {TaskKind::Pairwise, "pairwise"},
};

std::string iso8601(Clock::time_point t) {
  std::time_t tt = Clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const std::vector<std::string>& section_bullets(const Analysis& a, Section s) {
  return s == Section::Findings ? a.findings : a.suggestions;
}

std::string req_string(const json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_string())
    throw ApiError(422, fmt::format("field '{}' must be a string", key));
  return body[key].get<std::string>();
}

int lower_median(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

std::string pair_id(const std::string& task, const std::string& a, const std::string& b) {
  return "pw-" + content_id(fmt::format("{}\x1f{}\x1f{}", task, a, b));
}

std::string lines_of(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  return out;
}

template <class T>
std::string lines_of_records(const std::vector<T>& records) {
  std::vector<json> js;
  for (const auto& r : records) js.push_back(store::to_json(r));
  return lines_of(js);
}

}  // namespace

std::string_view to_string(TaskKind k) {
  for (auto& [v, n] : kKinds)
    if (v == k) return n;
  return "?";
}

TaskKind task_kind_from_string(std::string_view s) {
  for (auto& [v, n] : kKinds)
    if (n == s) return v;
  throw ApiError(400, fmt::format("unknown task kind '{}' (expected query-filter, bullet-rate, refine or pairwise)", s));
}

RefinementDraft draft_refinement(const std::vector<RatedAnswer>& candidates) {
  RefinementDraft d;
  for (Section s : {Section::Findings, Section::Suggestions}) {
    auto& chosen = s == Section::Findings ? d.findings : d.suggestions;
    auto& backfill = s == Section::Findings ? d.backfill_findings : d.backfill_suggestions;
    std::set<std::string> seen;
    std::vector<RefinementDraft::Candidate> borderline;
    for (const auto& c : candidates) {
      const auto& bullets = section_bullets(c.answer.analysis, s);
      for (std::size_t i = 0; i < bullets.size(); ++i) {
        auto it = c.ratings.find({s, static_cast<int>(i)});
        if (it == c.ratings.end()) continue;
        RefinementDraft::Candidate cand{{c.answer.id, s, static_cast<int>(i)}, bullets[i], it->second};
        if (it->second == static_cast<int>(Helpfulness::VeryHelpful)) {
          if (seen.insert(text::normalize_for_compare(bullets[i])).second) chosen.push_back(std::move(cand));
        } else if (it->second == static_cast<int>(Helpfulness::Borderline)) {
          borderline.push_back(std::move(cand));
        }
      }
    }
    if (chosen.size() < Analysis::kMinGoldBullets) {
      for (auto& b : borderline)
        if (seen.insert(text::normalize_for_compare(b.text)).second) backfill.push_back(std::move(b));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

AnnotationService::AnnotationService(fs::path state_dir, ServiceOptions options)
    : dir_(std::move(state_dir)), opt_(std::move(options)), rng_(opt_.seed) {
  if (!fs::is_directory(dir_))
    throw std::invalid_argument(fmt::format("state dir {} does not exist", dir_.string()));
  load();
}

void AnnotationService::load() {
  using namespace store::files;
  databases_ = store::read_records<Database>(dir_ / kDatabases);
  queries_ = store::read_records<Query>(dir_ / kQueries);
  for (auto& a : store::read_records<store::AnswerRecord>(dir_ / kAnswers)) {
    if (a.source == "refined") refined_.push_back(std::move(a));
    else if (a.source != "gold") candidates_.push_back(std::move(a));
  }
  decisions_ = store::read_records<store::QueryDecision>(dir_ / kQueryDecisions);
  ratings_ = store::read_records<BulletRating>(dir_ / kRatings);
  judgments_ = store::read_records<Judgment>(dir_ / kJudgments);

  std::map<std::string, std::vector<const store::AnswerRecord*>> by_task;
  for (const auto& a : candidates_) by_task[a.task_id].push_back(&a);
  for (auto& [task, answers] : by_task) {
    std::sort(answers.begin(), answers.end(), [](auto* x, auto* y) { return x->id < y->id; });
    for (std::size_t i = 0; i < answers.size(); ++i)
      for (std::size_t j = i + 1; j < answers.size(); ++j)
        if (answers[i]->source != answers[j]->source)
          pairs_.push_back({pair_id(task, answers[i]->id, answers[j]->id), task, answers[i]->id, answers[j]->id});
  }

  for (const auto& d : decisions_) submitted_[{TaskKind::QueryFilter, d.query_id}].insert(d.annotator);
  for (const auto& r : ratings_) submitted_[{TaskKind::BulletRate, r.bullet.answer_id}].insert(r.rater);
  for (const auto& a : refined_) submitted_[{TaskKind::Refine, a.task_id}].insert(a.annotator);
  for (const auto& j : judgments_) submitted_[{TaskKind::Pairwise, pair_id(j.task_id, j.left_id, j.right_id)}].insert(j.judge);

  decisions_out_ = std::make_unique<store::JsonlWriter>(dir_ / kQueryDecisions);
  ratings_out_ = std::make_unique<store::JsonlWriter>(dir_ / kRatings);
  answers_out_ = std::make_unique<store::JsonlWriter>(dir_ / kAnswers);
  judgments_out_ = std::make_unique<store::JsonlWriter>(dir_ / kJudgments);
  spdlog::info("state dir {}: {} queries, {} candidate answers, {} pairs, {} ratings", dir_.string(), queries_.size(),
               candidates_.size(), pairs_.size(), ratings_.size());
}

std::vector<RatedAnswer> AnnotationService::rated_candidates_locked(const std::string& task_id) const {
  std::vector<RatedAnswer> out;
  for (const auto& a : candidates_) {
    if (a.task_id != task_id) continue;
    std::map<std::pair<Section, int>, std::vector<int>> raw;
    for (const auto& r : ratings_)
      if (r.bullet.answer_id == a.id) raw[{r.bullet.section, r.bullet.index}].push_back(static_cast<int>(r.rating));
    if (raw.empty()) continue;
    RatedAnswer ra{a, {}};
    for (auto& [k, v] : raw) ra.ratings[k] = lower_median(v);
    out.push_back(std::move(ra));
    if (out.size() == opt_.max_refine_candidates) break;
  }
  return out;
}

std::vector<std::string> AnnotationService::items_locked(TaskKind kind) const {
  std::vector<std::string> out;
  switch (kind) {
    case TaskKind::QueryFilter:
      for (const auto& q : queries_) out.push_back(q.id);
      break;
    case TaskKind::BulletRate:
      for (const auto& a : candidates_) out.push_back(a.id);
      break;
    case TaskKind::Refine: {
      std::set<std::string> seen;
      for (const auto& a : candidates_)
        if (seen.insert(a.task_id).second && !rated_candidates_locked(a.task_id).empty()) out.push_back(a.task_id);
      break;
    }
    case TaskKind::Pairwise:
      for (const auto& p : pairs_) out.push_back(p.id);
      break;
  }
  return out;
}

json AnnotationService::task_context_locked(const std::string& task_id) const {
  json ctx = {{"task_id", task_id}, {"query", ""}, {"database_id", ""}, {"database_title", ""}};
  for (const auto& q : queries_) {
    if (q.id != task_id) continue;
    ctx["query"] = q.display_text();
    ctx["database_id"] = q.database_id;
    for (const auto& d : databases_)
      if (d.id == q.database_id) ctx["database_title"] = d.title;
  }
  return ctx;
}

json AnnotationService::payload_locked(TaskKind kind, const std::string& item, const Lease& lease) const {
  auto bullets_json = [](const std::vector<std::string>& v) {
    json arr = json::array();
    for (std::size_t i = 0; i < v.size(); ++i) arr.push_back({{"index", i}, {"text", v[i]}});
    return arr;
  };
  auto answer = [&](const std::string& id) -> const store::AnswerRecord& {
    for (const auto& a : candidates_)
      if (a.id == id) return a;
    throw ApiError(404, fmt::format("unknown answer '{}'", id));
  };
  switch (kind) {
    case TaskKind::QueryFilter: {
      for (const auto& q : queries_) {
        if (q.id != item) continue;
        json p = task_context_locked(q.id);
        p["role"] = q.role;
        p["intention"] = q.intention;
        p["schema"] = "";
        for (const auto& d : databases_)
          if (d.id == q.database_id) p["schema"] = ingest::linearize_schema(d);
        return p;
      }
      break;
    }
    case TaskKind::BulletRate: {
      const auto& a = answer(item);
      return {{"answer_id", a.id},
              {"task", task_context_locked(a.task_id)},
              {"findings", bullets_json(a.analysis.findings)},
              {"suggestions", bullets_json(a.analysis.suggestions)}};
    }
    case TaskKind::Refine: {
      auto rated = rated_candidates_locked(item);
      auto draft = draft_refinement(rated);
      auto cands = [](const std::vector<RefinementDraft::Candidate>& v) {
        json arr = json::array();
        for (const auto& c : v)
          arr.push_back({{"answer_id", c.ref.answer_id},
                         {"section", std::string(to_string(c.ref.section))},
                         {"index", c.ref.index},
                         {"text", c.text},
                         {"rating", c.rating}});
        return arr;
      };
      json candidates = json::array();
      for (const auto& r : rated) {
        json f = json::array(), s = json::array();
        for (const auto& [k, v] : r.ratings) {
          const auto& bullets = section_bullets(r.answer.analysis, k.first);
          if (k.second < 0 || static_cast<std::size_t>(k.second) >= bullets.size()) continue;
          (k.first == Section::Findings ? f : s).push_back({{"index", k.second}, {"text", bullets[k.second]}, {"rating", v}});
        }
        candidates.push_back({{"answer_id", r.answer.id}, {"findings", f}, {"suggestions", s}});
      }
      return {{"task", task_context_locked(item)},
              {"candidates", candidates},
              {"selected", {{"findings", cands(draft.findings)}, {"suggestions", cands(draft.suggestions)}}},
              {"backfill", {{"findings", cands(draft.backfill_findings)}, {"suggestions", cands(draft.backfill_suggestions)}}},
              {"needs_backfill",
               {{"findings", draft.findings.size() < Analysis::kMinGoldBullets},
                {"suggestions", draft.suggestions.size() < Analysis::kMinGoldBullets}}},
              {"min_bullets", Analysis::kMinGoldBullets}};
    }
    case TaskKind::Pairwise: {
      for (const auto& p : pairs_) {
        if (p.id != item) continue;
        bool a_first = lease.order_seed % 2 == 0;
        const auto& first = answer(a_first ? p.a : p.b);
        const auto& second = answer(a_first ? p.b : p.a);
        auto report = [](const char* label, const store::AnswerRecord& r) {
          return json{{"label", label}, {"findings", r.analysis.findings}, {"suggestions", r.analysis.suggestions}};
        };
        return {{"task", task_context_locked(p.task_id)}, {"reports", {report("A", first), report("B", second)}}};
      }
      break;
    }
  }
  throw ApiError(404, fmt::format("unknown {} item '{}'", to_string(kind), item));
}

std::string AnnotationService::token_locked() { return fmt::format("{:016x}{:016x}", rng_(), rng_()); }

json AnnotationService::next_task(TaskKind kind, const std::string& annotator) {
  std::lock_guard lock(mu_);
  const auto now = opt_.clock();
  for (auto& [key, ls] : leases_)
    ls.erase(std::remove_if(ls.begin(), ls.end(), [&](const Lease& l) { return l.expires <= now; }), ls.end());

  auto respond = [&](const std::string& item, const Lease& l) {
    return json{{"kind", std::string(to_string(kind))},
                {"task",
                 {{"item_id", item},
                  {"lease_token", l.token},
                  {"lease_expires_at", iso8601(l.expires)},
                  {"payload", payload_locked(kind, item, l)}}}};
  };

  // A page reload gets the same item back.
  for (const auto& [key, ls] : leases_) {
    if (key.first != kind) continue;
    for (const auto& l : ls)
      if (l.annotator == annotator) return respond(key.second, l);
  }

  auto items = items_locked(kind);
  std::stable_sort(items.begin(), items.end(), [&](const std::string& x, const std::string& y) {
    auto cx = submitted_.count({kind, x}) ? submitted_.at({kind, x}).size() : 0;
    auto cy = submitted_.count({kind, y}) ? submitted_.at({kind, y}).size() : 0;
    return cx < cy;
  });
  for (const auto& item : items) {
    Key key{kind, item};
    auto sit = submitted_.find(key);
    std::size_t done = sit == submitted_.end() ? 0 : sit->second.size();
    if (sit != submitted_.end() && sit->second.count(annotator)) continue;
    auto& ls = leases_[key];
    if (done + ls.size() >= static_cast<std::size_t>(opt_.annotations_per_item)) continue;
    if (!ls.empty()) continue;  // leased to someone else
    ls.push_back({annotator, token_locked(), now + opt_.lease, static_cast<std::int64_t>(rng_() & 0x7fffffff)});
    return respond(item, ls.back());
  }
  return {{"kind", std::string(to_string(kind))}, {"task", nullptr}};
}

const AnnotationService::Lease& AnnotationService::check_lease_locked(TaskKind kind, const std::string& item,
                                                                     const std::string& annotator,
                                                                     const json& body) const {
  std::string token = req_string(body, "lease_token");
  auto it = leases_.find({kind, item});
  if (it != leases_.end()) {
    for (const auto& l : it->second) {
      if (l.token != token || l.annotator != annotator) continue;
      if (l.expires <= opt_.clock()) break;
      return l;
    }
  }
  throw ApiError(409, fmt::format("lease on {} item '{}' expired or not held; request a new task", to_string(kind), item));
}

json AnnotationService::submit(const std::string& annotator, const json& body) {
  if (!body.is_object()) throw ApiError(400, "body must be a JSON object");
  TaskKind kind = task_kind_from_string(req_string(body, "kind"));
  std::string item = req_string(body, "item_id");
  std::lock_guard lock(mu_);
  auto items = items_locked(kind);
  if (std::find(items.begin(), items.end(), item) == items.end())
    throw ApiError(404, fmt::format("unknown {} item '{}'", to_string(kind), item));
  Key key{kind, item};
  if (submitted_.count(key) && submitted_[key].count(annotator))
    throw ApiError(409, fmt::format("annotator '{}' already submitted {} item '{}'", annotator, to_string(kind), item));
  const Lease lease = check_lease_locked(kind, item, annotator, body);

  json record;
  switch (kind) {
    case TaskKind::QueryFilter: {
      QueryStatus status;
      RejectionReason reason;
      try {
        status = query_status_from_string(req_string(body, "status"));
        reason = rejection_reason_from_string(body.value("reason", std::string{}));
      } catch (const std::invalid_argument& e) {
        throw ApiError(422, e.what());
      }
      if (status == QueryStatus::Pending) throw ApiError(422, "status must be accepted or rejected");
      if (status == QueryStatus::Rejected && reason == RejectionReason::None)
        throw ApiError(422, "a rejection needs a reason: not-application-driven or unanswerable-from-database");
      if (status == QueryStatus::Accepted && reason != RejectionReason::None)
        throw ApiError(422, "an accepted query takes no rejection reason");
      store::QueryDecision d{item, status, reason, annotator};
      decisions_out_->append(d);
      decisions_.push_back(d);
      record = store::to_json(d);
      break;
    }
    case TaskKind::BulletRate: {
      const store::AnswerRecord* a = nullptr;
      for (const auto& c : candidates_)
        if (c.id == item) a = &c;
      if (!body.contains("ratings") || !body["ratings"].is_array()) throw ApiError(422, "field 'ratings' must be an array");
      std::map<std::pair<Section, int>, Helpfulness> got;
      for (const auto& r : body["ratings"]) {
        Section s;
        int index, value;
        try {
          s = section_from_string(req_string(r, "section"));
          index = r.at("index").get<int>();
          value = r.at("rating").get<int>();
        } catch (const json::exception&) {
          throw ApiError(422, "each rating needs section, integer index and integer rating");
        } catch (const std::invalid_argument& e) {
          throw ApiError(422, e.what());
        }
        if (index < 0 || static_cast<std::size_t>(index) >= section_bullets(a->analysis, s).size())
          throw ApiError(422, fmt::format("{} {} does not exist", to_string(s), index));
        if (value < 0 || value > 2) throw ApiError(422, fmt::format("rating {} outside 0..2", value));
        if (!got.emplace(std::pair{s, index}, static_cast<Helpfulness>(value)).second)
          throw ApiError(422, fmt::format("{} {} rated twice", to_string(s), index));
      }
      std::size_t total = a->analysis.findings.size() + a->analysis.suggestions.size();
      if (got.size() != total)
        throw ApiError(422, fmt::format("every bullet must be rated: {} of {} rated", got.size(), total));
      std::string block;
      json arr = json::array();
      std::vector<BulletRating> new_ratings;
      for (const auto& [k, v] : got) {
        BulletRating br{{item, k.first, k.second}, v, annotator};
        json j = store::to_json(br);
        block += j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
        arr.push_back(std::move(j));
        new_ratings.push_back(br);
      }
      ratings_out_->write_raw(block);
      ratings_.insert(ratings_.end(), new_ratings.begin(), new_ratings.end());
      record = std::move(arr);
      break;
    }
    case TaskKind::Refine: {
      if (!body.contains("analysis")) throw ApiError(422, "field 'analysis' is required");
      Analysis an;
      try {
        an = store::from_json<Analysis>(body["analysis"]);
      } catch (const store::RecordError& e) {
        throw ApiError(422, fmt::format("analysis: {}", e.what()));
      }
      for (auto* v : {&an.findings, &an.suggestions})
        for (auto& b : *v) b = std::string(text::trim(b));
      auto bad = an.gold_violations();
      for (Section s : {Section::Findings, Section::Suggestions}) {
        std::set<std::string> seen;
        for (const auto& b : section_bullets(an, s))
          if (!b.empty() && !seen.insert(text::normalize_for_compare(b)).second)
            bad.push_back(fmt::format("duplicate {} bullet: {}", to_string(s), b));
      }
      if (!bad.empty()) throw ApiError(422, fmt::format("refined answer rejected: {}", fmt::join(bad, "; ")));
      store::AnswerRecord rec{content_id(fmt::format("{}\x1frefined\x1f{}", item, annotator)), item, "refined", an,
                              annotator, {}};
      auto rated = rated_candidates_locked(item);
      for (const auto& pj : body.value("provenance", json::array())) {
        store::AnswerRecord::Origin o;
        try {
          o.section = section_from_string(req_string(pj, "section"));
          o.index = pj.at("index").get<int>();
          const json& from = pj.at("from");
          o.from = {req_string(from, "answer_id"), section_from_string(req_string(from, "section")),
                    from.at("index").get<int>()};
        } catch (const json::exception&) {
          throw ApiError(422, "provenance entries need section, index and from{answer_id, section, index}");
        } catch (const std::invalid_argument& e) {
          throw ApiError(422, e.what());
        }
        if (o.index < 0 || static_cast<std::size_t>(o.index) >= section_bullets(an, o.section).size())
          throw ApiError(422, fmt::format("provenance points at missing {} {}", to_string(o.section), o.index));
        const store::AnswerRecord* src = nullptr;
        for (const auto& r : rated)
          if (r.answer.id == o.from.answer_id) src = &r.answer;
        if (!src) throw ApiError(422, fmt::format("answer '{}' is not a candidate for this task", o.from.answer_id));
        const auto& sb = section_bullets(src->analysis, o.from.section);
        if (o.from.index < 0 || static_cast<std::size_t>(o.from.index) >= sb.size())
          throw ApiError(422, "provenance refers to a missing candidate bullet");
        o.original_text = sb[o.from.index];
        rec.provenance.push_back(std::move(o));
      }
      answers_out_->append(rec);
      refined_.push_back(rec);
      record = store::to_json(rec);
      break;
    }
    case TaskKind::Pairwise: {
      std::string pick = req_string(body, "pick");
      if (pick != "A" && pick != "B") throw ApiError(422, "pick must be \"A\" or \"B\"");
      const Pair* p = nullptr;
      for (const auto& x : pairs_)
        if (x.id == item) p = &x;
      bool a_first = lease.order_seed % 2 == 0;
      bool picked_a = (pick == "A") == a_first;
      Judgment j{p->task_id, p->a, p->b, picked_a ? Choice::Left : Choice::Right, annotator, lease.order_seed,
                 body.value("rationale", std::string{})};
      judgments_out_->append(j);
      judgments_.push_back(j);
      record = store::to_json(j);
      break;
    }
  }
  submitted_[key].insert(annotator);
  auto& ls = leases_[key];
  ls.erase(std::remove_if(ls.begin(), ls.end(), [&](const Lease& l) { return l.token == lease.token; }), ls.end());
  return {{"ok", true}, {"record", record}};
}

std::map<std::string, std::map<std::string, std::string>> AnnotationService::labels_locked(TaskKind kind) const {
  std::map<std::string, std::map<std::string, std::string>> out;  // annotator -> unit -> label
  switch (kind) {
    case TaskKind::QueryFilter:
      for (const auto& d : decisions_)
        out[d.annotator][d.query_id] = fmt::format("{}/{}", to_string(d.status), to_string(d.reason));
      break;
    case TaskKind::BulletRate:
      for (const auto& r : ratings_)
        out[r.rater][fmt::format("{}/{}/{}", r.bullet.answer_id, to_string(r.bullet.section), r.bullet.index)] =
            std::to_string(static_cast<int>(r.rating));
      break;
    case TaskKind::Refine:
      // Candidate point selection: every bullet of every candidate offered
      // for the task is labelled selected or not.
      for (const auto& a : refined_) {
        std::set<std::tuple<std::string, Section, int>> picked;
        for (const auto& o : a.provenance) picked.insert({o.from.answer_id, o.from.section, o.from.index});
        for (const auto& c : rated_candidates_locked(a.task_id))
          for (Section s : {Section::Findings, Section::Suggestions})
            for (std::size_t i = 0; i < section_bullets(c.answer.analysis, s).size(); ++i)
              out[a.annotator][fmt::format("{}/{}/{}", c.answer.id, to_string(s), i)] =
                  picked.count({c.answer.id, s, static_cast<int>(i)}) ? "selected" : "not-selected";
      }
      break;
    case TaskKind::Pairwise:
      for (const auto& j : judgments_)
        out[j.judge][pair_id(j.task_id, j.left_id, j.right_id)] = std::string(to_string(j.choice));
      break;
  }
  return out;
}

json AnnotationService::agreement(TaskKind kind) const {
  std::lock_guard lock(mu_);
  auto labels = labels_locked(kind);
  json pairs = json::array();
  json annotators = json::array();
  for (const auto& [a, m] : labels) annotators.push_back(a);
  double kappa_sum = 0, acc_sum = 0;
  std::size_t n_total = 0;
  for (auto i = labels.begin(); i != labels.end(); ++i) {
    for (auto j = std::next(i); j != labels.end(); ++j) {
      std::vector<std::string> la, lb;
      for (const auto& [unit, label] : i->second) {
        auto it = j->second.find(unit);
        if (it == j->second.end()) continue;
        la.push_back(label);
        lb.push_back(it->second);
      }
      if (la.empty()) continue;
      double k = eval::cohen_kappa(la, lb), acc = eval::raw_agreement(la, lb);
      pairs.push_back({{"annotators", {i->first, j->first}}, {"n", la.size()}, {"kappa", k}, {"accuracy", acc}});
      kappa_sum += k * static_cast<double>(la.size());
      acc_sum += acc * static_cast<double>(la.size());
      n_total += la.size();
    }
  }
  json out = {{"kind", std::string(to_string(kind))}, {"annotators", annotators}, {"pairs", pairs}, {"n", n_total}};
  if (n_total == 0) {
    out["kappa"] = nullptr;
    out["accuracy"] = nullptr;
    out["accuracy_text"] = nullptr;
  } else {
    double acc = acc_sum / static_cast<double>(n_total);
    out["kappa"] = kappa_sum / static_cast<double>(n_total);
    out["accuracy"] = acc;
    out["accuracy_text"] = fmt::format("{:.2f}", acc);
  }
  return out;
}

std::vector<std::string> AnnotationService::export_names() {
  return {"databases", "queries", "query_decisions", "answers", "refined", "ratings", "pointwise", "judgments"};
}

std::string AnnotationService::export_jsonl(const std::string& raw_name) const {
  std::string name = raw_name;
  if (name.size() > 6 && name.ends_with(".jsonl")) name.resize(name.size() - 6);
  std::lock_guard lock(mu_);
  if (name == "databases") return lines_of_records(databases_);
  if (name == "queries") {
    // Latest decision wins.
    std::vector<Query> qs = queries_;
    for (auto& q : qs)
      for (const auto& d : decisions_)
        if (d.query_id == q.id) {
          q.status = d.status;
          q.reason = d.reason;
        }
    return lines_of_records(qs);
  }
  if (name == "query_decisions") return lines_of_records(decisions_);
  if (name == "answers") {
    std::vector<store::AnswerRecord> all = candidates_;
    all.insert(all.end(), refined_.begin(), refined_.end());
    return lines_of_records(all);
  }
  if (name == "refined") return lines_of_records(refined_);
  if (name == "ratings") return lines_of_records(ratings_);
  if (name == "judgments") return lines_of_records(judgments_);
  if (name == "pointwise") {
    std::vector<json> out;
    for (const auto& a : candidates_) {
      std::vector<BulletRating> rs;
      for (const auto& r : ratings_)
        if (r.bullet.answer_id == a.id) rs.push_back(r);
      if (rs.empty()) continue;
      out.push_back({{"schema_version", store::kSchemaVersion},
                     {"answer_id", a.id},
                     {"task_id", a.task_id},
                     {"source", a.source},
                     {"n_ratings", rs.size()},
                     {"pointwise", eval::pointwise_aggregate(rs)}});
    }
    return lines_of(out);
  }
  throw ApiError(404, fmt::format("unknown export '{}'", raw_name));
}

// ---------------------------------------------------------------------------

struct HttpService::Impl {
  std::shared_ptr<AnnotationService> core;
  httplib::Server server;
  int port = 0;
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

std::string annotator_of(const httplib::Request& req) {
  std::string a = req.get_header_value(kAnnotatorHeader);
  if (text::trim(a).empty()) throw ApiError(401, fmt::format("missing {} header", kAnnotatorHeader));
  return std::string(text::trim(a));
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ApiError& e) {
      send_json(res, e.status(), {{"error", e.what()}, {"status", e.status()}});
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_json(res, 500, {{"error", e.what()}, {"status", 500}});
    }
  };
}

}  // namespace

HttpService::HttpService(std::shared_ptr<AnnotationService> core, std::optional<fs::path> static_dir)
    : impl_(std::make_unique<Impl>()) {
  impl_->core = std::move(core);
  auto* core_ptr = impl_->core.get();
  auto& srv = impl_->server;

  srv.Get("/api/tasks", guarded([core_ptr](const httplib::Request& req, httplib::Response& res) {
            std::string who = annotator_of(req);
            if (!req.has_param("kind")) throw ApiError(400, "query parameter 'kind' is required");
            send_json(res, 200, core_ptr->next_task(task_kind_from_string(req.get_param_value("kind")), who));
          }));
  srv.Post("/api/judgments", guarded([core_ptr](const httplib::Request& req, httplib::Response& res) {
             std::string who = annotator_of(req);
             json body;
             try {
               body = json::parse(req.body);
             } catch (const json::parse_error& e) {
               throw ApiError(400, fmt::format("body is not JSON: {}", e.what()));
             }
             send_json(res, 201, core_ptr->submit(who, body));
           }));
  srv.Get("/api/agreement", guarded([core_ptr](const httplib::Request& req, httplib::Response& res) {
            if (!req.has_param("kind")) throw ApiError(400, "query parameter 'kind' is required");
            send_json(res, 200, core_ptr->agreement(task_kind_from_string(req.get_param_value("kind"))));
          }));
  srv.Get("/api/export", guarded([core_ptr](const httplib::Request& req, httplib::Response& res) {
            if (!req.has_param("name")) {
              send_json(res, 200, {{"names", AnnotationService::export_names()}});
              return;
            }
            std::string name = req.get_param_value("name");
            std::string body = core_ptr->export_jsonl(name);
            std::string file = name.ends_with(".jsonl") ? name : name + ".jsonl";
            res.set_header("Content-Disposition", fmt::format("attachment; filename=\"{}\"", file));
            res.status = 200;
            res.set_content(body, "application/x-ndjson");
          }));
  if (static_dir) {
    if (!srv.set_mount_point("/", static_dir->string()))
      throw std::invalid_argument(fmt::format("static dir {} does not exist", static_dir->string()));
  }
}

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& host, int port) {
  if (port == 0) impl_->port = impl_->server.bind_to_any_port(host);
  else impl_->port = impl_->server.bind_to_port(host, port) ? port : -1;
  if (impl_->port < 0) throw std::runtime_error(fmt::format("cannot bind {}:{}", host, port));
  return impl_->port;
}

void HttpService::listen() { impl_->server.listen_after_bind(); }

void HttpService::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace dabench::service
