#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace sembid {

// Base class for every error raised by the library. Messages name the
// violated invariant so the CLI can print them verbatim.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input file rejected while parsing. Carries the 1-based line number and the
// offending column name (empty when the whole row is malformed).
class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, std::string field, const std::string& what)
      : Error(file + ":" + std::to_string(line) + (field.empty() ? "" : " [" + field + "]") + ": " + what),
        file_(std::move(file)),
        line_(line),
        field_(std::move(field)) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::string file_;
  std::size_t line_;
  std::string field_;
};

}  // namespace sembid
