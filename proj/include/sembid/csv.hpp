#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sembid::csv {

struct Row {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

struct Table {
  std::string source;
  std::vector<std::string> header;
  std::vector<Row> rows;

  // Index of a header column, or nullopt.
  std::optional<std::size_t> column(std::string_view name) const;
};

// RFC 4180 style: comma separated, double-quoted fields may contain commas,
// quotes ("") and newlines. A UTF-8 BOM and CRLF line endings are accepted.
Table parse(std::string_view text, std::string source = "<memory>");
Table read_file(const std::string& path);

// Every row must have exactly header.size() fields; raises ParseError.
void require_rectangular(const Table& table);
// Header must equal `expected` exactly; raises ParseError naming the column.
void require_header(const Table& table, const std::vector<std::string>& expected);

std::string escape(std::string_view field);
std::string join(const std::vector<std::string>& fields);

// Shortest decimal text that parses back to the same double ("%.17g" class).
std::string format_double(double value);
std::string format_optional(const std::optional<double>& value);

// C99 hexfloat ("%a"); round-trips every finite double bit-exactly.
std::string format_hex(double value);
double parse_hex(std::string_view text);  // accepts decimal too

std::optional<double> parse_optional_double(std::string_view text);
double parse_double(std::string_view text);
long long parse_integer(std::string_view text);

class Writer {
 public:
  explicit Writer(const std::string& path);
  void row(const std::vector<std::string>& fields);
  void close();
  ~Writer();

  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

 private:
  std::string path_;
  std::string buffer_;
  bool closed_ = false;
};

void write_text_file(const std::string& path, std::string_view content);
std::string read_text_file(const std::string& path);

}  // namespace sembid::csv
