#pragma once

// Small CSV / text helpers shared by the data-facing modules.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlmpc/error.hpp"

namespace mlmpc::io {

/// Fixed-format number rendering so repeated runs produce identical bytes.
inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd rows;
};

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  CsvTable table;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Io, "empty csv " + path.string());
  table.header = split(line);
  std::vector<std::vector<double>> values;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    require(cells.size() == table.header.size(), ErrorKind::Io,
            "ragged row in " + path.string() + ": " + line);
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw Error(ErrorKind::Io, "non-numeric cell '" + c + "' in " + path.string());
      }
    }
    values.push_back(std::move(row));
  }
  table.rows.resize(static_cast<Eigen::Index>(values.size()),
                    static_cast<Eigen::Index>(table.header.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = 0; j < values[i].size(); ++j)
      table.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i][j];
  return table;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    require(out_.good(), ErrorKind::Io, "cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }

  template <class Range>
  void row(const Range& values) {
    bool first = true;
    for (double v : values) {
      out_ << (first ? "" : ",") << num(v);
      first = false;
    }
    out_ << '\n';
  }

  void row(std::initializer_list<double> values) { row(std::vector<double>(values)); }

 private:
  std::ofstream out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace mlmpc::io
