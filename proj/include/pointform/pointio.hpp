#pragma once

#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pointform/error.hpp"
#include "pointform/geometry.hpp"

namespace pointform::io {

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_double(std::string_view token, const std::string& where) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    fail(ErrorKind::Format, where + ": invalid number '" + std::string(token) + "'");
  }
  return value;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  return in;
}

}  // namespace detail

/// ASCII XYZ: one "x y z" triple per line; blank lines and '#' comments skipped.
inline PointCloud read_xyz(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  PointCloud pc;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto tokens = detail::split_ws(line);
    if (tokens.empty() || tokens[0].front() == '#') continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (tokens.size() != 3) fail(ErrorKind::Format, where + ": expected 3 coordinates, got " + std::to_string(tokens.size()));
    pc.points.push_back({detail::parse_double(tokens[0], where), detail::parse_double(tokens[1], where),
                         detail::parse_double(tokens[2], where)});
  }
  return pc;
}

/// ASCII PLY with x/y/z vertex properties (any other properties ignored).
inline PointCloud read_ply(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  const std::string name = path.filename().string();
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return name + ":" + std::to_string(line_no); };

  if (!std::getline(in, line) || detail::split_ws(line) != std::vector<std::string_view>{"ply"}) {
    line_no = 1;
    fail(ErrorKind::Format, where() + ": missing 'ply' magic");
  }
  ++line_no;
  std::size_t vertex_count = 0;
  bool in_vertex = false, saw_vertex = false;
  std::vector<std::string> vertex_props;
  while (std::getline(in, line)) {
    ++line_no;
    auto t = detail::split_ws(line);
    if (t.empty()) continue;
    if (t[0] == "end_header") break;
    if (t[0] == "format") {
      if (t.size() < 2 || t[1] != "ascii") fail(ErrorKind::Format, where() + ": only ascii PLY is supported");
    } else if (t[0] == "element") {
      if (t.size() != 3) fail(ErrorKind::Format, where() + ": malformed element line");
      in_vertex = t[1] == "vertex";
      if (in_vertex) {
        saw_vertex = true;
        vertex_count = static_cast<std::size_t>(detail::parse_double(t[2], where()));
      }
    } else if (t[0] == "property" && in_vertex) {
      if (t.size() < 3 || t[1] == "list") fail(ErrorKind::Format, where() + ": unsupported vertex property");
      vertex_props.emplace_back(t.back());
    }
  }
  if (!saw_vertex) fail(ErrorKind::Format, name + ": no vertex element");
  auto column = [&](std::string_view p) -> std::size_t {
    for (std::size_t i = 0; i < vertex_props.size(); ++i)
      if (vertex_props[i] == p) return i;
    fail(ErrorKind::Format, name + ": vertex property '" + std::string(p) + "' missing");
  };
  const std::size_t cx = column("x"), cy = column("y"), cz = column("z");

  PointCloud pc;
  pc.points.reserve(vertex_count);
  while (pc.points.size() < vertex_count && std::getline(in, line)) {
    ++line_no;
    auto t = detail::split_ws(line);
    if (t.empty()) continue;
    if (t.size() != vertex_props.size()) {
      fail(ErrorKind::Format, where() + ": expected " + std::to_string(vertex_props.size()) + " values");
    }
    pc.points.push_back({detail::parse_double(t[cx], where()), detail::parse_double(t[cy], where()),
                         detail::parse_double(t[cz], where())});
  }
  if (pc.points.size() != vertex_count) fail(ErrorKind::Format, name + ": truncated vertex list");
  return pc;
}

inline PointCloud read_points(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".xyz") return read_xyz(path);
  if (ext == ".ply") return read_ply(path);
  fail(ErrorKind::Format, "unsupported point file extension '" + ext + "'");
}

inline void write_xyz(const std::filesystem::path& path, std::span<const Point3> points) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : points) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

/// ASCII PLY; when `scores` is non-empty each vertex carries a float "score".
inline void write_ply(const std::filesystem::path& path, std::span<const Point3> points,
                      std::span<const double> scores = {}) {
  if (!scores.empty() && scores.size() != points.size()) fail(ErrorKind::Dimension, "write_ply: score count mismatch");
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty double x\nproperty double y\nproperty double z\n";
  if (!scores.empty()) out << "property float score\n";
  out << "end_header\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < points.size(); ++i) {
    out << points[i][0] << ' ' << points[i][1] << ' ' << points[i][2];
    if (!scores.empty()) out << ' ' << static_cast<float>(scores[i]);
    out << '\n';
  }
}

}  // namespace pointform::io
