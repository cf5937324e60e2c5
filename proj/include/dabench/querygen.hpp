#pragma once

// Stakeholder query generation and the pairwise diversity measure.

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dabench/core.hpp"
#include "dabench/llm.hpp"
#include "dabench/similarity.hpp"

namespace dabench::querygen {

class ParseFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class PatternMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TooFewQueries : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kQueriesPerDatabase = 10;

struct Stakeholder {
  std::string role;       // without the leading article
  std::string intention;  // without a trailing period
  bool operator==(const Stakeholder&) const = default;
};

// "[N. ]As a|an|the <role>, I want to <intention>". Throws PatternMismatch.
Stakeholder parse_stakeholder_line(std::string_view line);

// Inverse of parse_stakeholder_line for article-free roles.
std::string format_stakeholder_line(const Stakeholder& s);

// Bodies of "N." / "N)" items in order; unnumbered lines continue the
// previous item.
std::vector<std::string> parse_numbered_list(std::string_view reply);

// At most kQueriesPerDatabase pending queries; duplicate texts collapse.
// Items that do not match the stakeholder pattern keep an empty role.
std::vector<Query> parse_queries(const Database& db, std::string_view reply);

// One retry when fewer than kQueriesPerDatabase items parse; the larger
// parse wins. Throws ParseFailure when both attempts yield nothing.
std::vector<Query> generate_queries(const Database& db, llm::Backend& backend,
                                    const llm::GenerationParams& params = {});

enum class Bucket { Low, Medium, High };
std::string_view to_string(Bucket b);

// low < 0.5 <= medium <= 0.8 < high
Bucket bucket_for(double similarity);

struct DiversityReport {
  double low = 0;  // percentages summing to 100
  double medium = 0;
  double high = 0;
  std::size_t n_pairs = 0;
};

// Scores every same-database pair. Only accepted queries count unless
// include_all. Databases with fewer than two queries contribute nothing;
// throws TooFewQueries when no pair remains.
DiversityReport diversity_buckets(const std::vector<Query>& queries, sim::Embedder& embedder,
                                  bool include_all = false);

}  // namespace dabench::querygen
