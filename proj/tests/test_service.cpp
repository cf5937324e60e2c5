#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "dabench/service.hpp"
#include "dabench/text.hpp"
#include "test_util.hpp"

using namespace dabench;
using namespace dabench::service;
using nlohmann::json;
namespace dt = dabench::testing;

namespace {

struct FakeClock {
  std::chrono::system_clock::time_point now{std::chrono::hours(24 * 365 * 50)};
  std::function<std::chrono::system_clock::time_point()> fn() {
    return [this] { return now; };
  }
};

store::AnswerRecord answer(std::string id, std::string task, std::string source, Analysis a) {
  return {std::move(id), std::move(task), std::move(source), std::move(a), "", {}};
}

Analysis ten_bullets(const std::string& tag) {
  Analysis a;
  for (int i = 0; i < 5; ++i) a.findings.push_back(fmt::format("{} finding {}", tag, i));
  for (int i = 0; i < 5; ++i) a.suggestions.push_back(fmt::format("{} suggestion {}", tag, i));
  return a;
}

// db1 with queries q1..q3; q1 has answers from three systems, q2 from two.
void seed_state(const std::filesystem::path& dir) {
  {
    store::JsonlWriter dbs(dir / store::files::kDatabases);
    dbs.append(dt::make_database("db1", {dt::make_table("member", 3, 2)}));
    store::JsonlWriter qs(dir / store::files::kQueries);
    for (int i = 1; i <= 3; ++i)
      qs.append(Query{fmt::format("q{}", i), "db1", "store manager", fmt::format("goal {}", i), QueryStatus::Pending,
                      RejectionReason::None, ""});
    store::JsonlWriter as(dir / store::files::kAnswers);
    as.append(answer("a1", "q1", "sysA", ten_bullets("alpha")));
    as.append(answer("a2", "q1", "sysB", ten_bullets("beta")));
    as.append(answer("a3", "q1", "sysC", ten_bullets("gamma")));
    as.append(answer("b1", "q2", "sysA", ten_bullets("delta")));
    as.append(answer("b2", "q2", "sysB", ten_bullets("epsilon")));
    as.append(answer("g1", "q1", "gold", ten_bullets("gold")));
  }
}

json rate_all(const json& task, int value) {
  json ratings = json::array();
  for (const char* s : {"findings", "suggestions"})
    for (const auto& b : task["payload"][s]) ratings.push_back({{"section", s}, {"index", b["index"]}, {"rating", value}});
  return {{"kind", "bullet-rate"}, {"item_id", task["item_id"]}, {"lease_token", task["lease_token"]}, {"ratings", ratings}};
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ApiError& e) {
    return e.status();
  }
  return 200;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override { seed_state(dir.path()); }
  std::unique_ptr<AnnotationService> make(ServiceOptions o = {}) {
    o.clock = clock.fn();
    o.seed = 7;
    return std::make_unique<AnnotationService>(dir.path(), o);
  }
  dt::TempDir dir;
  FakeClock clock;
};

}  // namespace

TEST_F(ServiceTest, LeasesKeepTwoAnnotatorsApart) {
  auto svc = make();
  auto t1 = svc->next_task(TaskKind::QueryFilter, "ann1");
  auto t2 = svc->next_task(TaskKind::QueryFilter, "ann2");
  ASSERT_FALSE(t1["task"].is_null());
  ASSERT_FALSE(t2["task"].is_null());
  EXPECT_NE(t1["task"]["item_id"], t2["task"]["item_id"]);
  // A reload returns the same lease.
  EXPECT_EQ(svc->next_task(TaskKind::QueryFilter, "ann1"), t1);
  EXPECT_NE(t1["task"]["payload"]["schema"].get<std::string>().find("member"), std::string::npos);

  // After expiry the item goes back into the queue.
  clock.now += std::chrono::minutes(11);
  auto t3 = svc->next_task(TaskKind::QueryFilter, "ann3");
  auto t1b = svc->next_task(TaskKind::QueryFilter, "ann1");
  EXPECT_NE(t1b["task"]["lease_token"], t1["task"]["lease_token"]);
  json late = {{"kind", "query-filter"}, {"item_id", t2["task"]["item_id"]}, {"lease_token", t2["task"]["lease_token"]},
               {"status", "accepted"}};
  EXPECT_EQ(status_of([&] { svc->submit("ann2", late); }), 409);
}

TEST_F(ServiceTest, QueryFilterDecisionsAndErrors) {
  auto svc = make();
  auto t = svc->next_task(TaskKind::QueryFilter, "ann1")["task"];
  json body = {{"kind", "query-filter"}, {"item_id", t["item_id"]}, {"lease_token", t["lease_token"]}};
  json no_reason = body;
  no_reason["status"] = "rejected";
  EXPECT_EQ(status_of([&] { svc->submit("ann1", no_reason); }), 422);
  json no_token = body;
  no_token.erase("lease_token");
  no_token["status"] = "accepted";
  EXPECT_EQ(status_of([&] { svc->submit("ann1", no_token); }), 422);
  json wrong = body;
  wrong["lease_token"] = "nope";
  wrong["status"] = "accepted";
  EXPECT_EQ(status_of([&] { svc->submit("ann1", wrong); }), 409);
  json ok = body;
  ok["status"] = "accepted";
  EXPECT_EQ(svc->submit("ann1", ok)["record"]["status"], "accepted");
  EXPECT_EQ(status_of([&] { svc->submit("ann1", ok); }), 409);
  EXPECT_EQ(status_of([&] { svc->submit("ann1", {{"kind", "query-filter"}, {"item_id", "zz"}, {"lease_token", "x"}}); }), 404);

  auto t2 = svc->next_task(TaskKind::QueryFilter, "ann1")["task"];
  svc->submit("ann1", {{"kind", "query-filter"},
                       {"item_id", t2["item_id"]},
                       {"lease_token", t2["lease_token"]},
                       {"status", "rejected"},
                       {"reason", "unanswerable-from-database"}});
  std::map<std::string, Query> exported;
  for (const auto& line : text::split_lines(svc->export_jsonl("queries")))
    if (!line.empty()) {
      auto q = store::from_json<Query>(json::parse(line));
      exported[q.id] = q;
    }
  EXPECT_EQ(exported.at(t["item_id"]).status, QueryStatus::Accepted);
  EXPECT_EQ(exported.at(t2["item_id"]).status, QueryStatus::Rejected);
  EXPECT_EQ(exported.at(t2["item_id"]).reason, RejectionReason::UnanswerableFromDatabase);
}

TEST_F(ServiceTest, BulletRatingAllOrNothingAndAgreement) {
  auto svc = make();
  auto t1 = svc->next_task(TaskKind::BulletRate, "ann1")["task"];
  json partial = rate_all(t1, 2);
  partial["ratings"].erase(partial["ratings"].size() - 1);
  EXPECT_EQ(status_of([&] { svc->submit("ann1", partial); }), 422);
  json dup = rate_all(t1, 2);
  dup["ratings"][9] = dup["ratings"][0];
  EXPECT_EQ(status_of([&] { svc->submit("ann1", dup); }), 422);
  json bad = rate_all(t1, 2);
  bad["ratings"][0]["rating"] = 3;
  EXPECT_EQ(status_of([&] { svc->submit("ann1", bad); }), 422);
  EXPECT_EQ(svc->submit("ann1", rate_all(t1, 2))["record"].size(), 10u);

  // The second annotator gets the same answer once ann1 is done with it.
  std::string item = t1["item_id"];
  json t2;
  for (int guard = 0; guard < 10; ++guard) {
    t2 = svc->next_task(TaskKind::BulletRate, "ann2")["task"];
    if (t2["item_id"] == item) break;
    svc->submit("ann2", rate_all(t2, 1));
  }
  ASSERT_EQ(t2["item_id"], item);
  svc->submit("ann2", rate_all(t2, 2));
  auto ag = svc->agreement(TaskKind::BulletRate);
  ASSERT_EQ(ag["pairs"].size(), 1u);
  EXPECT_EQ(ag["pairs"][0]["n"], 10);
  EXPECT_EQ(ag["kappa"], 1.0);
  EXPECT_EQ(ag["accuracy"], 1.0);

  bool found = false;
  for (const auto& line : text::split_lines(svc->export_jsonl("pointwise.jsonl"))) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    if (j["answer_id"] == item) {
      found = true;
      EXPECT_EQ(j["n_ratings"], 20);
      EXPECT_EQ(j["pointwise"], 2.0);
    }
  }
  EXPECT_TRUE(found);
}

TEST(DraftRefinement, CombinesDedupesAndBackfills) {
  RatedAnswer a{{"a1", "q", "s", {{"Sales rose", "Members are young", "noise"}, {"Open earlier"}}, "", {}},
                {{{Section::Findings, 0}, 2}, {{Section::Findings, 1}, 1}, {{Section::Findings, 2}, 0},
                 {{Section::Suggestions, 0}, 2}}};
  RatedAnswer b{{"a2", "q", "s2", {{"sales  ROSE", "Weekend peak"}, {"Hire staff", "Add a menu", "Raise prices"}}, "", {}},
                {{{Section::Findings, 0}, 2}, {{Section::Findings, 1}, 1}, {{Section::Suggestions, 0}, 2},
                 {{Section::Suggestions, 1}, 2}, {{Section::Suggestions, 2}, 2}}};
  auto d = draft_refinement({a, b});
  ASSERT_EQ(d.findings.size(), 1u);  // "sales  ROSE" duplicates "Sales rose"
  EXPECT_EQ(d.findings[0].ref, (BulletRef{"a1", Section::Findings, 0}));
  ASSERT_EQ(d.backfill_findings.size(), 2u);
  EXPECT_EQ(d.backfill_findings[0].text, "Members are young");
  EXPECT_EQ(d.backfill_findings[1].text, "Weekend peak");
  EXPECT_EQ(d.suggestions.size(), 4u);
  EXPECT_TRUE(d.backfill_suggestions.empty());
}

TEST_F(ServiceTest, RefinementRulesAndProvenance) {
  auto svc = make();
  EXPECT_TRUE(svc->next_task(TaskKind::Refine, "ann1")["task"].is_null());  // nothing rated yet
  // Rate a1: findings 0,1 very helpful, 2,3 borderline; suggestions all very helpful.
  auto t = svc->next_task(TaskKind::BulletRate, "rater")["task"];
  ASSERT_EQ(t["item_id"], "a1");
  json body = rate_all(t, 2);
  for (auto& r : body["ratings"])
    if (r["section"] == "findings") r["rating"] = r["index"].get<int>() < 2 ? 2 : (r["index"].get<int>() < 4 ? 1 : 0);
  svc->submit("rater", body);

  auto rt = svc->next_task(TaskKind::Refine, "ann1")["task"];
  ASSERT_FALSE(rt.is_null());
  EXPECT_EQ(rt["item_id"], "q1");
  const auto& p = rt["payload"];
  EXPECT_EQ(p["selected"]["findings"].size(), 2u);
  EXPECT_TRUE(p["needs_backfill"]["findings"].get<bool>());
  EXPECT_FALSE(p["needs_backfill"]["suggestions"].get<bool>());
  ASSERT_EQ(p["backfill"]["findings"].size(), 2u);
  EXPECT_EQ(p["backfill"]["findings"][0]["rating"], 1);

  json two = {{"kind", "refine"},
              {"item_id", "q1"},
              {"lease_token", rt["lease_token"]},
              {"analysis", {{"findings", {"alpha finding 0", "alpha finding 1"}},
                            {"suggestions", {"s one", "s two", "s three"}}}}};
  try {
    svc->submit("ann1", two);
    FAIL();
  } catch (const ApiError& e) {
    EXPECT_EQ(e.status(), 422);
    EXPECT_NE(std::string(e.what()).find("at least 3 findings"), std::string::npos) << e.what();
  }
  json three = two;
  three["analysis"]["findings"] = {"alpha finding 0", "Alpha finding 1, edited", "alpha finding 2"};
  three["provenance"] = {{{"section", "findings"}, {"index", 1}, {"from", {{"answer_id", "a1"}, {"section", "findings"}, {"index", 1}}}}};
  auto rec = store::from_json<store::AnswerRecord>(svc->submit("ann1", three)["record"]);
  EXPECT_EQ(rec.source, "refined");
  EXPECT_EQ(rec.analysis.findings[1], "Alpha finding 1, edited");
  ASSERT_EQ(rec.provenance.size(), 1u);
  EXPECT_EQ(rec.provenance[0].original_text, "alpha finding 1");

  json dup = three;
  dup["analysis"]["findings"] = {"x", "X ", "y"};
  auto t2 = svc->next_task(TaskKind::Refine, "ann2")["task"];
  dup["lease_token"] = t2["lease_token"];
  EXPECT_EQ(status_of([&] { svc->submit("ann2", dup); }), 422);
}

TEST_F(ServiceTest, PairwiseOrderSeedResolvesChoices) {
  ServiceOptions o;
  o.annotations_per_item = 1000;
  auto svc = make(o);
  // Which answer each findings list belongs to.
  std::map<std::string, std::string> owner = {{"alpha finding 0", "a1"}, {"beta finding 0", "a2"},
                                              {"gamma finding 0", "a3"}, {"delta finding 0", "b1"},
                                              {"epsilon finding 0", "b2"}};
  std::set<std::int64_t> parities;
  for (int trial = 0; trial < 50; ++trial) {
    std::string who = fmt::format("ann{}", trial);
    auto t = svc->next_task(TaskKind::Pairwise, who)["task"];
    ASSERT_FALSE(t.is_null());
    std::string shown_a = owner.at(t["payload"]["reports"][0]["findings"][0]);
    std::string pick = trial % 3 == 0 ? "B" : "A";
    std::string picked = pick == "A" ? shown_a : owner.at(t["payload"]["reports"][1]["findings"][0]);
    auto j = store::from_json<Judgment>(
        svc->submit(who, {{"kind", "pairwise"}, {"item_id", t["item_id"]}, {"lease_token", t["lease_token"]}, {"pick", pick}})["record"]);
    std::string preferred = j.choice == Choice::Left ? j.left_id : j.right_id;
    EXPECT_EQ(preferred, picked) << "trial " << trial;
    EXPECT_LT(j.left_id, j.right_id);
    parities.insert(j.order_seed % 2);
  }
  EXPECT_EQ(parities.size(), 2u);  // both presentation orders occurred
}

TEST_F(ServiceTest, RefinementSelectionAgreement) {
  auto svc = make();
  auto t = svc->next_task(TaskKind::BulletRate, "rater")["task"];
  ASSERT_EQ(t["item_id"], "a1");
  svc->submit("rater", rate_all(t, 2));
  auto submit_refined = [&](const std::string& who, std::vector<int> picks) {
    auto rt = svc->next_task(TaskKind::Refine, who)["task"];
    json prov = json::array();
    Analysis an;
    int k = 0;
    for (int i : picks) {
      an.findings.push_back(fmt::format("alpha finding {}", i));
      prov.push_back({{"section", "findings"}, {"index", k++}, {"from", {{"answer_id", "a1"}, {"section", "findings"}, {"index", i}}}});
    }
    an.suggestions = {"s1", "s2", "s3"};
    svc->submit(who, {{"kind", "refine"}, {"item_id", "q1"}, {"lease_token", rt["lease_token"]},
                      {"analysis", store::to_json(an)}, {"provenance", prov}});
  };
  // 10 candidate bullets; the annotators disagree on findings 3 and 4 only.
  submit_refined("ann1", {0, 1, 2, 3});
  submit_refined("ann2", {0, 1, 2, 4});
  auto ag = svc->agreement(TaskKind::Refine);
  EXPECT_EQ(ag["n"], 10);
  EXPECT_DOUBLE_EQ(ag["accuracy"].get<double>(), 0.8);
  EXPECT_EQ(ag["accuracy_text"], "0.80");
}

TEST_F(ServiceTest, StateSurvivesRestart) {
  json t;
  {
    auto svc = make();
    t = svc->next_task(TaskKind::QueryFilter, "ann1")["task"];
    svc->submit("ann1", {{"kind", "query-filter"}, {"item_id", t["item_id"]}, {"lease_token", t["lease_token"]}, {"status", "accepted"}});
  }
  auto svc = make();
  EXPECT_EQ(status_of([&] {
              svc->submit("ann1", {{"kind", "query-filter"}, {"item_id", t["item_id"]}, {"lease_token", "x"}, {"status", "accepted"}});
            }),
            409);
  auto next = svc->next_task(TaskKind::QueryFilter, "ann1")["task"];
  EXPECT_NE(next["item_id"], t["item_id"]);
  EXPECT_NE(svc->export_jsonl("query_decisions").find("\"annotator\":\"ann1\""), std::string::npos);
  EXPECT_THROW(AnnotationService(dir / "missing"), std::invalid_argument);
}

TEST_F(ServiceTest, HttpEndpoints) {
  dt::write_file(dir / "static/index.html", "<html>console</html>");
  auto core = std::shared_ptr<AnnotationService>(make());
  HttpService http(core, dir / "static");
  int port = http.bind("127.0.0.1", 0);
  std::thread th([&] { http.listen(); });
  httplib::Client cli("127.0.0.1", port);
  httplib::Headers who = {{kAnnotatorHeader, "ann1"}};

  auto r = cli.Get("/api/tasks?kind=query-filter");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 401);
  r = cli.Get("/api/tasks?kind=nonsense", who);
  EXPECT_EQ(r->status, 400);
  r = cli.Get("/api/tasks?kind=query-filter", who);
  ASSERT_EQ(r->status, 200);
  auto task = json::parse(r->body)["task"];
  json body = {{"kind", "query-filter"}, {"item_id", task["item_id"]}, {"lease_token", task["lease_token"]}, {"status", "accepted"}};
  r = cli.Post("/api/judgments", who, body.dump(), "application/json");
  EXPECT_EQ(r->status, 201);
  r = cli.Post("/api/judgments", who, body.dump(), "application/json");
  EXPECT_EQ(r->status, 409);
  EXPECT_NE(json::parse(r->body)["error"].get<std::string>().find("already submitted"), std::string::npos);
  r = cli.Post("/api/judgments", who, "{not json", "application/json");
  EXPECT_EQ(r->status, 400);
  r = cli.Get("/api/agreement?kind=query-filter");
  EXPECT_EQ(r->status, 200);
  EXPECT_TRUE(json::parse(r->body)["kappa"].is_null());
  r = cli.Get("/api/export?name=query_decisions");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "application/x-ndjson");
  EXPECT_EQ(store::from_json<store::QueryDecision>(json::parse(text::split_lines(r->body).at(0))).annotator, "ann1");
  r = cli.Get("/api/export?name=bogus");
  EXPECT_EQ(r->status, 404);
  r = cli.Get("/index.html");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "<html>console</html>");
  http.stop();
  th.join();
}
