/**
 * @file io.hpp
 * @brief Text files, field tables and minimal SVG plots.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icecr/errors.hpp"
#include "icecr/fem.hpp"

namespace icecr {

/// Shortest text that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v || std::isnan(v)) return buf;
  }
  return buf;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Writes to a sibling temporary, then renames.
inline void write_text_file_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Comma-separated numeric table with a header row; '#' lines are comments.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  [[nodiscard]] std::size_t column(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw IoError("table has no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }
  [[nodiscard]] std::vector<double> values(const std::string& name) const {
    const auto c = column(name);
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r[c]);
    return v;
  }
};

inline std::string format_table(const Table& t) {
  std::ostringstream s;
  for (std::size_t c = 0; c < t.columns.size(); ++c) s << (c ? "," : "") << t.columns[c];
  s << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) s << (c ? "," : "") << format_double(r[c]);
    s << '\n';
  }
  return s.str();
}

/// Parses a table whose non-header cells are all numeric.
inline Table parse_table(const std::string& text, const std::string& origin = "table") {
  Table t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split(line);
    if (t.columns.empty()) {
      t.columns = cells;
      continue;
    }
    if (cells.size() != t.columns.size())
      throw IoError(origin + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                    " columns, found " + std::to_string(cells.size()));
    std::vector<double> row;
    for (const auto& c : cells) {
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      if (end == c.c_str() || *end != '\0')
        throw IoError(origin + ":" + std::to_string(lineno) + ": non-numeric cell '" + c + "'");
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw IoError(origin + ": missing header row");
  return t;
}

inline Table load_table(const std::filesystem::path& path) { return parse_table(read_text_file(path), path.string()); }

// ------------------------------------------------------------------ field tables

/// cell, v0, v1, v2, borehole, corner_excluded
inline Table topology_table(const DomeMesh& m) {
  Table t{{"cell", "v0", "v1", "v2", "borehole", "corner_excluded"}, {}};
  for (std::size_t c = 0; c < m.cell_count(); ++c) {
    const auto& tri = m.triangles[c];
    t.rows.push_back({double(c), double(tri[0]), double(tri[1]), double(tri[2]), double(m.borehole[c]),
                      double(m.corner_excluded[c])});
  }
  return t;
}

/// P2 velocity nodes: vertices first, then edge midpoints.
inline Table velocity_table(const Discretization& d, const Eigen::VectorXd& w) {
  Table t{{"node_x", "node_y", "u_x", "u_y"}, {}};
  for (Eigen::Index n = 0; n < d.velocity_nodes(); ++n) {
    const auto x = d.node_coordinate(n);
    t.rows.push_back({x.x(), x.y(), w(d.u_dof(n, 0)), w(d.u_dof(n, 1))});
  }
  return t;
}

/// P0 pressure at cell centroids.
inline Table pressure_table(const Discretization& d, const Eigen::VectorXd& w) {
  Table t{{"node_x", "node_y", "p"}, {}};
  const auto& m = d.mesh();
  for (std::size_t c = 0; c < m.cell_count(); ++c) {
    Eigen::Vector2d x = Eigen::Vector2d::Zero();
    for (int v : m.triangles[c]) x += m.vertices[static_cast<std::size_t>(v)] / 3.0;
    t.rows.push_back({x.x(), x.y(), w(d.p_dof(static_cast<Eigen::Index>(c)))});
  }
  return t;
}

/// P1 nodal values (damage or any vertex field).
inline Table vertex_table(const DomeMesh& m, const Eigen::VectorXd& values, const std::string& name) {
  require(values.size() == static_cast<Eigen::Index>(m.vertex_count()), "vertex field size mismatch");
  Table t{{"node_x", "node_y", name}, {}};
  for (std::size_t v = 0; v < m.vertex_count(); ++v)
    t.rows.push_back({m.vertices[v].x(), m.vertices[v].y(), values(static_cast<Eigen::Index>(v))});
  return t;
}

inline Eigen::VectorXd damage_field(const Discretization& d, const Eigen::VectorXd& w) {
  Eigen::VectorXd phi(static_cast<Eigen::Index>(d.mesh().vertex_count()));
  for (Eigen::Index v = 0; v < phi.size(); ++v) phi(v) = w(d.phi_dof(v));
  return phi;
}

/// velocity.csv, pressure.csv, damage.csv and topology.csv under `dir`.
inline void dump_fields(const std::filesystem::path& dir, const Discretization& d, const Eigen::VectorXd& w) {
  write_text_file_atomic(dir / "topology.csv", format_table(topology_table(d.mesh())));
  write_text_file_atomic(dir / "velocity.csv", format_table(velocity_table(d, w)));
  write_text_file_atomic(dir / "pressure.csv", format_table(pressure_table(d, w)));
  write_text_file_atomic(dir / "damage.csv", format_table(vertex_table(d.mesh(), damage_field(d, w), "phi")));
}

// ------------------------------------------------------------------ svg

namespace svg {

/// Blue-white-red diverging map on [-1, 1]; values outside are clamped.
inline std::string diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  int r, g, b;
  if (t < 0) {
    r = static_cast<int>(255 * (1 + t));
    g = r;
    b = 255;
  } else {
    r = 255;
    g = static_cast<int>(255 * (1 - t));
    b = g;
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

struct Series {
  std::string label;
  std::vector<double> x, y;
};

/// Log-log scatter; nonpositive points are dropped.
inline std::string scatter_loglog(const std::vector<Series>& series, const std::string& xlabel,
                                  const std::string& ylabel) {
  const int W = 640, H = 480, L = 70, R = 160, T = 20, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (s.x[i] > 0 && s.y[i] > 0) {
        x0 = std::min(x0, std::log10(s.x[i]));
        x1 = std::max(x1, std::log10(s.x[i]));
        y0 = std::min(y0, std::log10(s.y[i]));
        y1 = std::max(y1, std::log10(s.y[i]));
      }
  if (!std::isfinite(x0)) x0 = y0 = 0, x1 = y1 = 1;
  x0 = std::floor(x0), y0 = std::floor(y0), x1 = std::ceil(x1 + 1e-12), y1 = std::ceil(y1 + 1e-12);
  auto px = [&](double v) { return L + (std::log10(v) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (std::log10(v) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream s;
  s << header(W, H);
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(x0); e <= static_cast<int>(x1); ++e)
    s << "<text x=\"" << px(std::pow(10.0, e)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">1e" << e
      << "</text>\n";
  for (int e = static_cast<int>(y0); e <= static_cast<int>(y1); ++e)
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(std::pow(10.0, e)) + 4 << "\" text-anchor=\"end\">1e" << e
      << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  s << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel
    << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* c = colors[k % 6];
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      if (series[k].x[i] > 0 && series[k].y[i] > 0)
        s << "<circle cx=\"" << px(series[k].x[i]) << "\" cy=\"" << py(series[k].y[i]) << "\" r=\"3\" fill=\"" << c
          << "\" fill-opacity=\"0.7\"/>\n";
    s << "<circle cx=\"" << W - R + 15 << "\" cy=\"" << T + 15 + 20 * k << "\" r=\"4\" fill=\"" << c << "\"/>\n";
    s << "<text x=\"" << W - R + 25 << "\" y=\"" << T + 19 + 20 * k << "\">" << series[k].label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Filled triangles colored by a vertex field (mean of corners), symmetric color range.
inline std::string triangle_field(const std::vector<Eigen::Vector2d>& vertices,
                                  const std::vector<std::array<int, 3>>& triangles, const std::vector<double>& values,
                                  const std::string& title) {
  const int W = 800, H = 300, M = 30;
  double xmax = 0, ymax = 0, vmax = 0;
  for (const auto& v : vertices) xmax = std::max(xmax, v.x()), ymax = std::max(ymax, v.y());
  for (double v : values) vmax = std::max(vmax, std::abs(v));
  if (vmax == 0) vmax = 1;
  const double scale = std::min((W - 2 * M) / std::max(xmax, 1e-12), (H - 2 * M) / std::max(ymax, 1e-12));
  std::ostringstream s;
  s << header(W, H) << "<text x=\"" << M << "\" y=\"18\">" << title << " (|max| = " << format_double(vmax)
    << ")</text>\n";
  for (const auto& t : triangles) {
    double mean = 0;
    s << "<polygon points=\"";
    for (int v : t) {
      const auto& p = vertices[static_cast<std::size_t>(v)];
      s << M + scale * p.x() << "," << H - M - scale * p.y() << " ";
      mean += values[static_cast<std::size_t>(v)] / 3.0;
    }
    s << "\" fill=\"" << diverging(mean / vmax) << "\" stroke=\"#999\" stroke-width=\"0.3\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Heat map of scattered (x, y, value) nodes drawn as cells of a tensor grid.
inline std::string grid_heatmap(const std::vector<double>& x, const std::vector<double>& y,
                                const std::vector<double>& v, const std::string& xlabel, const std::string& ylabel,
                                const std::string& title) {
  const int W = 640, H = 480, L = 70, R = 20, T = 30, B = 50;
  if (x.empty()) return header(W, H) + "</svg>\n";
  const auto [xa, xb] = std::minmax_element(x.begin(), x.end());
  const auto [ya, yb] = std::minmax_element(y.begin(), y.end());
  double vmax = 0;
  for (double e : v) vmax = std::max(vmax, std::abs(e));
  if (vmax == 0) vmax = 1;
  std::vector<double> ux(x), uy(y);
  std::sort(ux.begin(), ux.end());
  ux.erase(std::unique(ux.begin(), ux.end()), ux.end());
  std::sort(uy.begin(), uy.end());
  uy.erase(std::unique(uy.begin(), uy.end()), uy.end());
  const double dx = (W - L - R) / static_cast<double>(ux.size()), dy = (H - T - B) / static_cast<double>(uy.size());
  std::ostringstream s;
  s << header(W, H) << "<text x=\"" << L << "\" y=\"18\">" << title << " (|max| = " << format_double(vmax)
    << ")</text>\n";
  for (std::size_t k = 0; k < x.size(); ++k) {
    const auto i = static_cast<double>(std::lower_bound(ux.begin(), ux.end(), x[k]) - ux.begin());
    const auto j = static_cast<double>(std::lower_bound(uy.begin(), uy.end(), y[k]) - uy.begin());
    s << "<rect x=\"" << L + i * dx << "\" y=\"" << H - B - (j + 1) * dy << "\" width=\"" << dx + 0.5
      << "\" height=\"" << dy + 0.5 << "\" fill=\"" << diverging(v[k] / vmax) << "\"/>\n";
  }
  s << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\">" << format_double(*xa) << "</text>\n";
  s << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\">" << format_double(*xb)
    << "</text>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << H - B << "\" text-anchor=\"end\">" << format_double(*ya) << "</text>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << T + 10 << "\" text-anchor=\"end\">" << format_double(*yb) << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  s << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel
    << "</text>\n</svg>\n";
  return s.str();
}

}  // namespace svg
}  // namespace icecr
