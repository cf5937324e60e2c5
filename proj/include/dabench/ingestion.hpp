#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dabench/core.hpp"

namespace dabench::ingest {

// Error raised while reading a corpus. file/line are empty/0 when not
// attributable to a location.
class IngestError : public std::runtime_error {
 public:
  enum class Kind { NoTables, HeaderError, RowError, EmptyTable, InvalidDatabase, Io };
  IngestError(Kind kind, std::string message, std::string file = {}, std::size_t line = 0);
  Kind kind() const { return kind_; }
  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::string file_;
  std::size_t line_;
};

class EmptyCorpus : public std::invalid_argument {
 public:
  EmptyCorpus() : std::invalid_argument("corpus has no databases or tables") {}
};

// Share of non-empty cells that must parse as a kind for the column to take it.
inline constexpr double kKindThreshold = 0.95;

ColumnKind infer_column_kind(const std::vector<std::string>& cells);
Cell make_cell(std::string raw, ColumnKind kind);

// RFC 4180 style: comma separated, '"' quoting with "" escapes, records may
// span lines. Invalid UTF-8 is replaced rather than rejected.
struct CsvRecord {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based physical line where the record starts
};
std::vector<CsvRecord> parse_csv(std::string_view data);

Table load_table(const std::filesystem::path& csv_path);

// One table per *.csv in dir (sorted by filename). Title comes from the first
// line of an optional "meta" file, falling back to the directory name.
Database load_database(const std::filesystem::path& dir);

// Every subdirectory holding at least one CSV, sorted by name.
std::vector<Database> load_corpus(const std::filesystem::path& root);

void write_table_csv(const Table& table, const std::filesystem::path& path);

std::string linearize_schema(const Database& db, std::size_t n_example_values = 5);

// Header plus the first max_rows rows, cells joined with " | ".
std::string linearize_content(const Table& table, std::size_t max_rows = 20);

// Fraction of tables with at most n rows.
double row_coverage(const std::vector<Database>& dbs, std::size_t n = 20);

struct DbCounts {
  std::string database_id;
  std::size_t n_tables = 0;
  std::size_t n_columns = 0;  // summed over tables
  std::size_t n_rows = 0;     // summed over tables
};

struct Summary {
  std::size_t median = 0;  // lower median for even counts
  std::size_t max = 0;
  std::size_t min = 0;
};

struct CorpusStats {
  std::vector<DbCounts> per_db;
  Summary tables;
  Summary columns;
  Summary rows;
};

Summary summarize(std::vector<std::size_t> values);
CorpusStats corpus_stats(const std::vector<Database>& dbs);
std::string format_stats_report(const CorpusStats& stats);

}  // namespace dabench::ingest
