#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "facet/common.hpp"

namespace facet {

// Minimal CSV layer for the panel/price/truth artifacts: comma separators, a
// header row, no quoting (identifiers and numbers only). Parse errors carry the
// 1-based data row index.
class CsvTable {
 public:
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_column(const std::string& name) const {
    int c = column(name);
    if (c < 0) throw schema_error("missing required column: " + name);
    return c;
  }

  double number_at(std::size_t row, int col) const {
    const std::string& s = rows[row][static_cast<std::size_t>(col)];
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw parse_error("non-numeric value '" + s + "' in column '" +
                        header[static_cast<std::size_t>(col)] + "' at data row " +
                        std::to_string(row + 1));
    return v;
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw dependency_error("cannot open file: " + path);
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
      std::size_t pos = s.find(',', start);
      if (pos == std::string::npos) {
        out.push_back(s.substr(start));
        break;
      }
      out.push_back(s.substr(start, pos - start));
      start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r')
      out.back().pop_back();
    return out;
  };
  if (!std::getline(in, line)) throw schema_error("empty file: " + path);
  t.header = split(line);
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != t.header.size())
      throw parse_error("row " + std::to_string(n) + " has " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(t.header.size()) + " in " + path);
    t.rows.push_back(std::move(fields));
  }
  return t;
}

// Shortest round-trip representation; identical bytes for identical doubles.
inline std::string format_number(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path) {
    if (!out_) throw error("cannot open for write: " + path);
  }

  void write_row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
    ++rows_;
  }

  std::size_t rows_written() const { return rows_; }

 private:
  std::ofstream out_;
  std::size_t rows_ = 0;
};

}  // namespace facet
