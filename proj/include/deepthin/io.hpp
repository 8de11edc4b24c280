// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

// Text formats: shapes files and whitespace-separated dense matrices.

#pragma once

#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepthin/core.hpp"
#include "deepthin/error.hpp"
#include "deepthin/planner.hpp"

namespace deepthin {

class LineError : public std::runtime_error {
 public:
  LineError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline bool parse_count(const std::string& tok, count_t& out) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) return false;
  try {
    out = std::stoull(tok);
  } catch (const std::out_of_range&) {
    return false;
  }
  return true;
}

inline std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

}  // namespace detail

/// One `name Q R` triple per line. `#` starts a comment; blank lines are skipped.
inline std::vector<MatrixShape> parse_shapes(std::istream& in) {
  std::vector<MatrixShape> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(detail::strip_comment(line));
    std::vector<std::string> toks;
    for (std::string t; ss >> t;) toks.push_back(t);
    if (toks.empty()) continue;
    if (toks.size() != 3) throw LineError("expected 'name Q R', got " + std::to_string(toks.size()) + " fields", lineno);
    MatrixShape s;
    s.name = toks[0];
    if (!detail::parse_count(toks[1], s.q) || s.q == 0) throw LineError("bad Q '" + toks[1] + "'", lineno);
    if (!detail::parse_count(toks[2], s.r_dim) || s.r_dim == 0) throw LineError("bad R '" + toks[2] + "'", lineno);
    for (const auto& prev : out) {
      if (prev.name == s.name) throw LineError("duplicate matrix name '" + s.name + "'", lineno);
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw LineError("no matrices in shapes file", lineno == 0 ? 1 : lineno);
  return out;
}

inline std::vector<MatrixShape> load_shapes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return parse_shapes(f);
}

/// Dense text matrix: one row per line, values separated by whitespace.
inline DenseMatrix parse_matrix(std::istream& in) {
  std::vector<double> vals;
  std::size_t cols = 0, rows = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(detail::strip_comment(line));
    std::size_t here = 0;
    for (std::string tok; ss >> tok; ++here) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw LineError("bad number '" + tok + "'", lineno);
      vals.push_back(v);
    }
    if (here == 0) continue;
    if (rows == 0) cols = here;
    if (here != cols) {
      throw LineError("row has " + std::to_string(here) + " values, expected " + std::to_string(cols), lineno);
    }
    ++rows;
  }
  if (rows == 0) throw LineError("empty matrix", lineno == 0 ? 1 : lineno);
  return DenseMatrix(rows, cols, std::move(vals));
}

inline DenseMatrix load_matrix(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return parse_matrix(f);
}

/// Writes with round-trip precision.
inline void write_matrix(std::ostream& out, const DenseMatrix& m) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out << (j ? " " : "") << m(i, j);
    out << '\n';
  }
}

inline void save_matrix(const std::string& path, const DenseMatrix& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_matrix(f, m);
}

}  // namespace deepthin
