#include "dabench/querygen.hpp"

#include <map>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dabench/ingestion.hpp"
#include "dabench/prompts.hpp"
#include "dabench/text.hpp"

namespace dabench::querygen {

namespace {

const std::regex& numbering() {
  static const std::regex re(R"(^\s*(\d+)[.)]\s*)");
  return re;
}

std::string strip_numbering(std::string_view line) {
  std::string s(line);
  std::smatch m;
  if (std::regex_search(s, m, numbering())) s = m.suffix().str();
  return std::string(text::trim(s));
}

}  // namespace

Stakeholder parse_stakeholder_line(std::string_view line) {
  static const std::regex pattern(R"(^as\s+(?:(?:a|an|the)\s+)?(.+?),\s*i\s+want\s+to\s+(.+)$)", std::regex::icase);
  auto body = strip_numbering(line);
  std::smatch m;
  if (!std::regex_match(body, m, pattern)) throw PatternMismatch(fmt::format("not a stakeholder query: {}", body));
  Stakeholder s{std::string(text::trim(m.str(1))), std::string(text::trim(m.str(2)))};
  if (s.intention.ends_with('.')) s.intention.pop_back();
  if (s.role.empty() || s.intention.empty()) throw PatternMismatch(fmt::format("empty role or intention: {}", body));
  return s;
}

std::string format_stakeholder_line(const Stakeholder& s) {
  return fmt::format("As the {}, I want to {}", s.role, s.intention);
}

std::vector<std::string> parse_numbered_list(std::string_view reply) {
  std::vector<std::string> items;
  bool in_item = false;
  for (const auto& raw : text::split_lines(reply)) {
    std::string line(text::trim(raw));
    std::smatch m;
    if (std::regex_search(line, m, numbering())) {
      items.push_back(std::string(text::trim(m.suffix().str())));
      in_item = true;
    } else if (line.empty()) {
      in_item = false;
    } else if (in_item) {
      items.back() += " " + line;
    }
  }
  std::erase_if(items, [](const std::string& s) { return s.empty(); });
  return items;
}

std::vector<Query> parse_queries(const Database& db, std::string_view reply) {
  std::vector<Query> out;
  std::set<std::string> seen;
  for (auto& item : parse_numbered_list(reply)) {
    if (out.size() >= kQueriesPerDatabase) break;
    Query q;
    q.database_id = db.id;
    q.text = item;
    q.id = query_id(db.id, item);
    if (!seen.insert(q.id).second) continue;
    try {
      auto s = parse_stakeholder_line(item);
      q.role = std::move(s.role);
      q.intention = std::move(s.intention);
    } catch (const PatternMismatch&) {
      spdlog::info("database {}: query without stakeholder pattern kept for filtering: {}", db.id, item);
    }
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<Query> generate_queries(const Database& db, llm::Backend& backend, const llm::GenerationParams& params) {
  llm::Conversation convo;
  convo.add(llm::Role::User, llm::render_prompt(llm::TemplateId::QueryGeneration,
                                                {{"database title", db.title},
                                                 {"database schema", ingest::linearize_schema(db)}}));
  auto best = parse_queries(db, backend.complete(convo, params));
  if (best.size() < kQueriesPerDatabase) {
    auto again = parse_queries(db, backend.complete(convo, params));
    if (again.size() > best.size()) best = std::move(again);
  }
  if (best.empty()) throw ParseFailure(fmt::format("database {}: no numbered queries in two replies", db.id));
  return best;
}

std::string_view to_string(Bucket b) {
  switch (b) {
    case Bucket::Low: return "low";
    case Bucket::Medium: return "medium";
    case Bucket::High: return "high";
  }
  return "?";
}

Bucket bucket_for(double similarity) {
  if (similarity < 0.5) return Bucket::Low;
  if (similarity <= 0.8) return Bucket::Medium;
  return Bucket::High;
}

DiversityReport diversity_buckets(const std::vector<Query>& queries, sim::Embedder& embedder, bool include_all) {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& q : queries) {
    if (include_all || q.status == QueryStatus::Accepted) groups[q.database_id].push_back(q.display_text());
  }
  std::size_t counts[3] = {0, 0, 0};
  DiversityReport r;
  for (const auto& [db, texts] : groups) {
    for (std::size_t i = 0; i < texts.size(); ++i) {
      for (std::size_t j = i + 1; j < texts.size(); ++j) {
        ++counts[static_cast<int>(bucket_for(embedder.similarity(texts[i], texts[j])))];
        ++r.n_pairs;
      }
    }
  }
  if (r.n_pairs == 0) throw TooFewQueries("no database has two queries to compare");
  double n = static_cast<double>(r.n_pairs);
  r.low = 100.0 * counts[0] / n;
  r.medium = 100.0 * counts[1] / n;
  r.high = 100.0 * counts[2] / n;
  return r;
}

}  // namespace dabench::querygen
