#include "dabench/ingestion.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "dabench/text.hpp"

namespace fs = std::filesystem;

namespace dabench::ingest {

IngestError::IngestError(Kind kind, std::string message, std::string file, std::size_t line)
    : std::runtime_error(file.empty()   ? message
                         : line == 0    ? fmt::format("{}: {}", file, message)
                                        : fmt::format("{}:{}: {}", file, line, message)),
      kind_(kind),
      file_(std::move(file)),
      line_(line) {}

namespace {

bool parse_int(std::string_view s, std::int64_t& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

bool parse_real(std::string_view s, double& out) {
  static const std::regex kReal(R"(^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$)");
  if (!std::regex_match(s.begin(), s.end(), kReal)) return false;
  out = std::strtod(std::string(s).c_str(), nullptr);
  return std::isfinite(out);
}

bool parse_bool(std::string_view s, bool& out) {
  if (text::iequals(s, "true") || text::iequals(s, "yes")) {
    out = true;
    return true;
  }
  if (text::iequals(s, "false") || text::iequals(s, "no")) {
    out = false;
    return true;
  }
  return false;
}

bool is_date_like(std::string_view s) {
  static const std::regex kDate(
      R"(^(\d{4}[-/]\d{1,2}([-/]\d{1,2})?|\d{1,2}[-/]\d{1,2}[-/]\d{2,4})([ T]\d{1,2}:\d{2}(:\d{2}(\.\d+)?)?)?$)");
  return std::regex_match(s.begin(), s.end(), kDate);
}

bool parses_as(std::string_view s, ColumnKind kind) {
  std::int64_t i;
  double d;
  bool b;
  switch (kind) {
    case ColumnKind::Integer: return parse_int(s, i);
    case ColumnKind::Real: return parse_real(s, d);
    case ColumnKind::Boolean: return parse_bool(s, b);
    case ColumnKind::DateLike: return is_date_like(s);
    case ColumnKind::Text: return true;
  }
  return false;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IngestError(IngestError::Kind::Io, "cannot open file", p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_csv(const fs::path& p) { return text::iequals(p.extension().string(), ".csv"); }

}  // namespace

ColumnKind infer_column_kind(const std::vector<std::string>& cells) {
  std::size_t non_empty = 0;
  for (const auto& c : cells) non_empty += !text::trim(c).empty();
  if (non_empty == 0) return ColumnKind::Text;
  for (auto kind : {ColumnKind::Integer, ColumnKind::Real, ColumnKind::Boolean, ColumnKind::DateLike}) {
    std::size_t hits = 0;
    for (const auto& c : cells) {
      auto t = text::trim(c);
      if (!t.empty() && parses_as(t, kind)) ++hits;
    }
    if (static_cast<double>(hits) >= kKindThreshold * static_cast<double>(non_empty)) return kind;
  }
  return ColumnKind::Text;
}

Cell make_cell(std::string raw, ColumnKind kind) {
  Cell cell;
  auto t = text::trim(raw);
  if (t.empty()) {
    cell.raw = std::move(raw);
    return cell;
  }
  std::int64_t i;
  double d;
  bool b;
  if (kind == ColumnKind::Integer && parse_int(t, i)) {
    cell.value = i;
  } else if (kind == ColumnKind::Real && parse_real(t, d)) {
    cell.value = d;
  } else if (kind == ColumnKind::Boolean && parse_bool(t, b)) {
    cell.value = b;
  } else {
    cell.value = std::string(t);
  }
  cell.raw = std::move(raw);
  return cell;
}

std::vector<CsvRecord> parse_csv(std::string_view data) {
  std::vector<CsvRecord> records;
  if (data.substr(0, 3) == "\xEF\xBB\xBF") data.remove_prefix(3);
  CsvRecord rec;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  rec.line = 1;
  auto end_field = [&] {
    rec.fields.push_back(text::sanitize_utf8(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    // A lone empty field is a blank line, not a record.
    if (!(rec.fields.size() == 1 && rec.fields[0].empty())) records.push_back(std::move(rec));
    rec = CsvRecord{};
    rec.line = line;
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    char c = data[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started && field.empty()) {
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',': end_field(); break;
      case '\r':
        if (i + 1 < data.size() && data[i + 1] == '\n') break;
        ++line;
        end_record();
        break;
      case '\n':
        ++line;
        end_record();
        break;
      default: field.push_back(c); field_started = true;
    }
  }
  if (!field.empty() || field_started || !rec.fields.empty()) end_record();
  return records;
}

Table load_table(const fs::path& csv_path) {
  const auto file = csv_path.filename().string();
  auto records = parse_csv(read_file(csv_path));
  if (records.empty()) throw IngestError(IngestError::Kind::HeaderError, "missing header row", file, 1);
  Table table;
  table.name = text::sanitize_identifier(csv_path.stem().string());
  const auto& header = records.front();
  std::set<std::string> seen;
  for (const auto& raw : header.fields) {
    auto name = std::string(text::trim(raw));
    if (name.empty()) {
      throw IngestError(IngestError::Kind::HeaderError, "empty column name", file, header.line);
    }
    if (!seen.insert(name).second) {
      throw IngestError(IngestError::Kind::HeaderError,
                        fmt::format("duplicate column name: {}", name), file, header.line);
    }
    table.columns.push_back({name, ColumnKind::Text});
  }
  const auto width = table.columns.size();
  std::vector<std::vector<std::string>> raw_rows;
  raw_rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    auto& fields = records[r].fields;
    if (fields.size() > width) {
      throw IngestError(IngestError::Kind::RowError,
                        fmt::format("row has {} cells, header has {}", fields.size(), width), file,
                        records[r].line);
    }
    // Short rows are common in hand-edited exports; missing cells are empty.
    fields.resize(width);
    raw_rows.push_back(std::move(fields));
  }
  if (raw_rows.empty()) throw IngestError(IngestError::Kind::EmptyTable, "table has no rows", file);
  for (std::size_t c = 0; c < width; ++c) {
    std::vector<std::string> column;
    column.reserve(raw_rows.size());
    for (const auto& row : raw_rows) column.push_back(row[c]);
    table.columns[c].kind = infer_column_kind(column);
  }
  table.rows.reserve(raw_rows.size());
  for (auto& row : raw_rows) {
    std::vector<Cell> cells;
    cells.reserve(width);
    for (std::size_t c = 0; c < width; ++c) cells.push_back(make_cell(std::move(row[c]), table.columns[c].kind));
    table.rows.push_back(std::move(cells));
  }
  return table;
}

Database load_database(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw IngestError(IngestError::Kind::Io, "not a directory", dir.string());
  }
  std::vector<fs::path> csvs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_csv(entry.path())) csvs.push_back(entry.path());
  }
  std::sort(csvs.begin(), csvs.end());
  if (csvs.empty()) throw IngestError(IngestError::Kind::NoTables, "no CSV files", dir.string());

  Database db;
  db.id = dir.filename().string();
  if (db.id.empty()) db.id = dir.parent_path().filename().string();
  db.title = db.id;
  if (auto meta = dir / "meta"; fs::is_regular_file(meta)) {
    auto lines = text::split_lines(read_file(meta));
    if (!lines.empty() && !text::trim(lines.front()).empty()) {
      db.title = text::sanitize_utf8(text::trim(lines.front()));
    }
  }
  for (const auto& p : csvs) db.tables.push_back(load_table(p));
  if (auto problems = validate_database(db); !problems.empty()) {
    throw IngestError(IngestError::Kind::InvalidDatabase, text::join(problems, "; "), dir.string());
  }
  return db;
}

std::vector<Database> load_corpus(const fs::path& root) {
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    bool has_csv = false;
    for (const auto& f : fs::directory_iterator(entry.path())) {
      if (f.is_regular_file() && is_csv(f.path())) {
        has_csv = true;
        break;
      }
    }
    if (has_csv) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Database> out;
  out.reserve(dirs.size());
  for (const auto& d : dirs) out.push_back(load_database(d));
  return out;
}

namespace {
std::string csv_quote(const std::string& s) {
  bool needs = s.find_first_of(",\"\r\n") != std::string::npos ||
               (!s.empty() && (s.front() == ' ' || s.back() == ' '));
  if (!needs) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}
}  // namespace

void write_table_csv(const Table& table, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError(IngestError::Kind::Io, "cannot write file", path.string());
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (c) out << ',';
    out << csv_quote(table.columns[c].name);
  }
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      out << csv_quote(row[c].raw);
    }
    out << '\n';
  }
}

std::string linearize_schema(const Database& db, std::size_t n_example_values) {
  std::vector<std::string> names;
  names.reserve(db.tables.size());
  for (const auto& t : db.tables) names.push_back(t.name);
  std::string out = fmt::format("Database `{}` has {} tables. Table names are: {}", db.title,
                                db.tables.size(), text::join(names, ", "));
  for (const auto& t : db.tables) {
    out += fmt::format("\n\nTable `{}` has {} rows and {} columns. Column are:", t.name,
                       t.n_rows(), t.n_columns());
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      std::vector<std::string> examples;
      std::set<std::string> seen;
      for (const auto& row : t.rows) {
        if (examples.size() >= n_example_values) break;
        auto v = std::string(text::trim(row[c].raw));
        if (v.empty() || !seen.insert(v).second) continue;
        examples.push_back(std::move(v));
      }
      out += fmt::format("\n`{}`, example values:", t.columns[c].name);
      if (!examples.empty()) out += " " + text::join(examples, ", ");
    }
  }
  return out;
}

std::string linearize_content(const Table& table, std::size_t max_rows) {
  std::vector<std::string> header;
  for (const auto& c : table.columns) header.push_back(c.name);
  std::string out = text::join(header, " | ");
  const auto shown = std::min(max_rows, table.n_rows());
  for (std::size_t r = 0; r < shown; ++r) {
    std::vector<std::string> cells;
    for (const auto& cell : table.rows[r]) cells.push_back(cell.raw);
    out += "\n" + text::join(cells, " | ");
  }
  if (shown < table.n_rows()) out += fmt::format("\n... ({} more rows)", table.n_rows() - shown);
  return out;
}

double row_coverage(const std::vector<Database>& dbs, std::size_t n) {
  std::size_t total = 0, covered = 0;
  for (const auto& db : dbs) {
    for (const auto& t : db.tables) {
      ++total;
      covered += t.n_rows() <= n;
    }
  }
  if (total == 0) throw EmptyCorpus();
  return static_cast<double>(covered) / static_cast<double>(total);
}

Summary summarize(std::vector<std::size_t> values) {
  if (values.empty()) return {};
  std::sort(values.begin(), values.end());
  return {values[(values.size() - 1) / 2], values.back(), values.front()};
}

CorpusStats corpus_stats(const std::vector<Database>& dbs) {
  if (dbs.empty()) throw EmptyCorpus();
  CorpusStats stats;
  std::vector<std::size_t> tables, columns, rows;
  for (const auto& db : dbs) {
    DbCounts counts{db.id, db.tables.size(), 0, 0};
    for (const auto& t : db.tables) {
      counts.n_columns += t.n_columns();
      counts.n_rows += t.n_rows();
    }
    tables.push_back(counts.n_tables);
    columns.push_back(counts.n_columns);
    rows.push_back(counts.n_rows);
    stats.per_db.push_back(std::move(counts));
  }
  stats.tables = summarize(tables);
  stats.columns = summarize(columns);
  stats.rows = summarize(rows);
  return stats;
}

std::string format_stats_report(const CorpusStats& stats) {
  std::string out = fmt::format("{:<12}{:>10}{:>10}{:>10}\n", "", "Med.", "Max", "Min");
  auto row = [&](std::string_view label, const Summary& s) {
    out += fmt::format("{:<12}{:>10}{:>10}{:>10}\n", label, s.median, s.max, s.min);
  };
  row("# tables", stats.tables);
  row("# columns", stats.columns);
  row("# rows", stats.rows);
  out += fmt::format("({} databases)\n", stats.per_db.size());
  return out;
}

}  // namespace dabench::ingest
