#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "graphem/data.hpp"
#include "graphem/error.hpp"
#include "graphem/graph.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

using Json = nlohmann::json;

/// Shortest decimal form that parses back to the same double; NaN as "NaN".
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

inline bool is_missing_token(std::string_view s) {
  if (s.empty()) return true;
  if (s.size() != 3) return false;
  return std::tolower(static_cast<unsigned char>(s[0])) == 'n' && std::tolower(static_cast<unsigned char>(s[1])) == 'a' &&
         std::tolower(static_cast<unsigned char>(s[2])) == 'n';
}

namespace detail {

inline std::string_view trim_view(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim_view(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// A numeric table with a header row.
struct Table {
  std::vector<std::string> names;
  DataMatrix data;
};

/// Parses CSV with a header row. Empty cells and NaN (any case) are missing.
inline Table read_csv(std::istream& in, const std::string& source = "input") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(source + ": empty file");
  Table t;
  for (auto name : detail::split_commas(line)) t.names.emplace_back(name);
  const auto p = t.names.size();
  std::vector<double> cells;
  Index rows = 0;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim_view(line).empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != p)
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(p) + " fields, found " +
                       std::to_string(fields.size()));
    for (std::size_t j = 0; j < p; ++j) {
      const auto f = fields[j];
      if (is_missing_token(f)) {
        cells.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v = 0.0;
      const char* first = f.data() + (f.front() == '+' ? 1 : 0);
      auto [ptr, ec] = std::from_chars(first, f.data() + f.size(), v);
      if (ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(v))
        throw ParseError(source + ":" + std::to_string(lineno) + ": column '" + t.names[j] + "': cannot parse '" +
                         std::string(f) + "'");
      cells.push_back(v);
    }
    ++rows;
  }
  Matrix values(rows, static_cast<Index>(p));
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < static_cast<Index>(p); ++j) values(i, j) = cells[static_cast<std::size_t>(i) * p + j];
  t.data = DataMatrix::from_nan(values);
  return t;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  return out;
}

inline Table read_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_csv(in, path.string());
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& names, const Matrix& values) {
  if (static_cast<Index>(names.size()) != values.cols()) throw ValidationError("write_csv: header and matrix widths differ");
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  out << '\n';
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j) out << (j ? "," : "") << format_double(values(i, j));
    out << '\n';
  }
}

/// Writes observed values and "NaN" for missing entries.
inline void write_csv(std::ostream& out, const std::vector<std::string>& names, const DataMatrix& x) {
  write_csv(out, names, x.values());
}

// ---------------------------------------------------------------------------
// Geometry

/// Accepts either an array of {name, kind, lat, lon} objects or an object
/// {"grid_spacing": deg, "columns": [...]}. kind is "temperature" or "proxy".
inline FieldGeometry geometry_from_json(const Json& j) {
  const Json* cols = &j;
  FieldGeometry g;
  if (j.is_object()) {
    if (!j.contains("columns")) throw ParseError("geometry object needs a 'columns' array");
    cols = &j.at("columns");
    if (j.contains("grid_spacing")) g.grid_spacing = j.at("grid_spacing").get<double>();
  }
  if (!cols->is_array()) throw ParseError("geometry columns must be an array");
  try {
    for (const auto& c : *cols) {
      const auto kind = c.at("kind").get<std::string>();
      ColumnKind k;
      if (kind == "temperature" || kind == "T") k = ColumnKind::temperature;
      else if (kind == "proxy" || kind == "P") k = ColumnKind::proxy;
      else throw ParseError("geometry: unknown column kind '" + kind + "'");
      g.add(c.at("name").get<std::string>(), k, c.at("lat").get<double>(), c.at("lon").get<double>());
    }
  } catch (const Json::exception& e) {
    throw ParseError(std::string("geometry: ") + e.what());
  }
  g.validate();
  return g;
}

inline Json geometry_to_json(const FieldGeometry& g) {
  Json cols = Json::array();
  for (std::size_t j = 0; j < g.names.size(); ++j)
    cols.push_back({{"name", g.names[j]}, {"kind", to_string(g.kinds[j])}, {"lat", g.lat[j]}, {"lon", g.lon[j]}});
  Json out = {{"columns", cols}};
  if (g.grid_spacing) out["grid_spacing"] = *g.grid_spacing;
  return out;
}

inline Json read_json(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline FieldGeometry read_geometry(const std::filesystem::path& path) {
  try {
    return geometry_from_json(read_json(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Data matrix whose CSV header must list the geometry's column names in order.
inline DataMatrix load_data(const std::filesystem::path& csv, const FieldGeometry& geom) {
  auto t = read_csv(csv);
  if (t.names.size() != geom.names.size())
    throw ParseError(csv.string() + ": " + std::to_string(t.names.size()) + " columns but geometry has " +
                     std::to_string(geom.names.size()));
  for (std::size_t j = 0; j < t.names.size(); ++j)
    if (t.names[j] != geom.names[j])
      throw ParseError(csv.string() + ": column " + std::to_string(j) + " is '" + t.names[j] + "', geometry says '" +
                       geom.names[j] + "'");
  t.data.require_observed_columns(geom.names);
  return std::move(t.data);
}

// ---------------------------------------------------------------------------
// Graphs

inline Json graph_to_json(const Graph& g) {
  Json edges = Json::array();
  for (const auto& [a, b] : g.edges()) edges.push_back({a, b});
  return {{"p", g.size()}, {"edges", edges}};
}

inline Graph graph_from_json(const Json& j) {
  try {
    Graph g(j.at("p").get<Index>());
    for (const auto& e : j.at("edges")) {
      const auto a = e.at(0).get<Index>(), b = e.at(1).get<Index>();
      if (a < 0 || b < 0 || a >= g.size() || b >= g.size()) throw ParseError("graph edge index out of range");
      g.add_edge(a, b);
    }
    return g;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("graph: ") + e.what());
  }
}

inline Graph read_graph(const std::filesystem::path& path) {
  try {
    return graph_from_json(read_json(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Content digests

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) noexcept {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  constexpr char digits[] = "0123456789abcdef";
  for (int k = 15; k >= 0; --k, v >>= 4) buf[k] = digits[v & 0xF];
  buf[16] = '\0';
  return buf;
}

inline std::string file_digest(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return "fnv1a64:" + hex64(fnv1a64(bytes));
}

}  // namespace graphem
