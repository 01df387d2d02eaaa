/**
 * @file mesh.hpp
 * @brief Structured triangulation of a grounded half-dome cross-section.
 *
 * Columns follow the surface profile: vertex (i, j) sits at x_i = i * span / nx,
 * y = H(x_i) * j / ny. Each quad is split along its (i, j)-(i+1, j+1) diagonal.
 *
 *   left  (x = 0)      symmetry           damage Neumann
 *   bed   (y = 0)      no-slip            damage Neumann
 *   front (x = span)   stress-free        damage Neumann
 *   top   (surface)    stress-free, Γ_T   damage Dirichlet (phi = 0)
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "icecr/errors.hpp"

namespace icecr {

enum class VelocityTag { symmetry, stress_free, no_slip };
enum class DamageTag { dirichlet, neumann };
enum class Side { left, bottom, right, top };

struct BoundaryEdge {
  int edge = -1;  ///< index into DomeMesh::edges
  int cell = -1;  ///< adjacent triangle
  Side side = Side::bottom;
  VelocityTag velocity = VelocityTag::no_slip;
  DamageTag damage = DamageTag::neumann;
  bool top_surface = false;  ///< member of Γ_T
};

struct MeshSpec {
  enum class Profile { vialov, flat };
  Profile profile = Profile::vialov;
  double length = 4.0;          ///< dome half-length L (Vialov) or box length (flat)
  double thickness = 1.0;       ///< divide thickness H0
  double front_fraction = 0.9;  ///< calving front at front_fraction * L (Vialov only)
  double flow_exponent = 3.0;   ///< n in the Vialov profile
  int nx = 10;
  int ny = 10;
  int borehole_column = -1;  ///< -1 = mid-span

  [[nodiscard]] double span() const { return profile == Profile::flat ? length : front_fraction * length; }

  [[nodiscard]] double surface(double x) const {
    if (profile == Profile::flat) return thickness;
    const double n = flow_exponent;
    const double r = std::clamp(x / length, 0.0, 1.0);
    return thickness * std::pow(1.0 - std::pow(r, (n + 1.0) / n), n / (2.0 * n + 2.0));
  }
};

struct DomeMesh {
  MeshSpec spec;
  std::vector<Eigen::Vector2d> vertices;
  std::vector<std::array<int, 3>> triangles;              ///< counter-clockwise
  std::vector<std::array<int, 2>> edges;                  ///< sorted vertex pairs
  std::vector<std::array<int, 3>> triangle_edges;         ///< local edges (0,1), (1,2), (2,0)
  std::vector<BoundaryEdge> boundary;
  std::vector<char> borehole;                             ///< per-cell Ω_B membership
  std::vector<char> corner_excluded;                      ///< cells touching the bed/front corner
  std::vector<std::array<int, 2>> cell_index;             ///< structured (i, j) of each cell

  [[nodiscard]] std::size_t vertex_count() const { return vertices.size(); }
  [[nodiscard]] std::size_t cell_count() const { return triangles.size(); }
  [[nodiscard]] std::size_t edge_count() const { return edges.size(); }

  [[nodiscard]] double cell_area(std::size_t c) const {
    const auto& t = triangles[c];
    const Eigen::Vector2d a = vertices[static_cast<std::size_t>(t[1])] - vertices[static_cast<std::size_t>(t[0])];
    const Eigen::Vector2d b = vertices[static_cast<std::size_t>(t[2])] - vertices[static_cast<std::size_t>(t[0])];
    return 0.5 * (a.x() * b.y() - a.y() * b.x());
  }

  /// Longest edge length.
  [[nodiscard]] double cell_diameter(std::size_t c) const {
    const auto& t = triangles[c];
    double h = 0.0;
    for (int k = 0; k < 3; ++k)
      h = std::max(h, (vertices[static_cast<std::size_t>(t[static_cast<std::size_t>(k)])] -
                       vertices[static_cast<std::size_t>(t[static_cast<std::size_t>((k + 1) % 3)])])
                          .norm());
    return h;
  }

  [[nodiscard]] Eigen::Vector2d edge_midpoint(std::size_t e) const {
    return 0.5 * (vertices[static_cast<std::size_t>(edges[e][0])] + vertices[static_cast<std::size_t>(edges[e][1])]);
  }
};

inline DomeMesh build_dome_mesh(const MeshSpec& spec) {
  require(spec.nx >= 2 && spec.ny >= 2, "mesh resolution must be at least 2 cells per direction");
  if (!(spec.length > 0.0) || !(spec.thickness > 0.0))
    throw DegenerateGeometry("dome length and thickness must be positive");
  if (spec.profile == MeshSpec::Profile::vialov && !(spec.front_fraction > 0.0 && spec.front_fraction < 1.0))
    throw DegenerateGeometry("calving front must lie strictly inside the dome (front_fraction in (0, 1))");

  DomeMesh m;
  m.spec = spec;
  const int nx = spec.nx;
  const int ny = spec.ny;
  const double span = spec.span();
  auto vid = [ny](int i, int j) { return i * (ny + 1) + j; };
  for (int i = 0; i <= nx; ++i) {
    const double x = span * i / nx;
    const double h = spec.surface(x);
    if (!(h > 0.0)) throw DegenerateGeometry("surface profile reaches zero thickness inside the domain");
    for (int j = 0; j <= ny; ++j) m.vertices.emplace_back(x, h * j / ny);
  }

  const int borehole_col = spec.borehole_column < 0 ? nx / 2 : spec.borehole_column;
  require(borehole_col < nx, "borehole column outside the mesh");
  const int corner = vid(nx, 0);
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      const int v00 = vid(i, j), v10 = vid(i + 1, j), v11 = vid(i + 1, j + 1), v01 = vid(i, j + 1);
      for (const auto& tri : {std::array<int, 3>{v00, v10, v11}, std::array<int, 3>{v00, v11, v01}}) {
        m.triangles.push_back(tri);
        m.cell_index.push_back({i, j});
        m.borehole.push_back(i == borehole_col ? 1 : 0);
        m.corner_excluded.push_back(std::find(tri.begin(), tri.end(), corner) != tri.end() ? 1 : 0);
      }
    }
  }
  for (std::size_t c = 0; c < m.cell_count(); ++c)
    if (!(m.cell_area(c) > 0.0)) throw DegenerateGeometry("triangle " + std::to_string(c) + " is not positively oriented");

  std::map<std::pair<int, int>, int> edge_of;
  m.triangle_edges.resize(m.cell_count());
  for (std::size_t c = 0; c < m.cell_count(); ++c) {
    const auto& t = m.triangles[c];
    for (std::size_t k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      const auto key = std::minmax(a, b);
      auto [it, inserted] = edge_of.try_emplace({key.first, key.second}, static_cast<int>(m.edges.size()));
      if (inserted) m.edges.push_back({key.first, key.second});
      m.triangle_edges[c][k] = it->second;
    }
  }

  auto add_boundary = [&](int a, int b, Side side, int cell) {
    const auto key = std::minmax(a, b);
    BoundaryEdge be;
    be.edge = edge_of.at({key.first, key.second});
    be.cell = cell;
    be.side = side;
    switch (side) {
      case Side::left: be.velocity = VelocityTag::symmetry; be.damage = DamageTag::neumann; break;
      case Side::bottom: be.velocity = VelocityTag::no_slip; be.damage = DamageTag::neumann; break;
      case Side::right: be.velocity = VelocityTag::stress_free; be.damage = DamageTag::neumann; break;
      case Side::top:
        be.velocity = VelocityTag::stress_free;
        be.damage = DamageTag::dirichlet;
        be.top_surface = true;
        break;
    }
    m.boundary.push_back(be);
  };
  // cell numbering: quad (i, j) -> lower triangle 2*(i*ny+j), upper 2*(i*ny+j)+1
  auto lower = [ny](int i, int j) { return 2 * (i * ny + j); };
  for (int i = 0; i < nx; ++i) {
    add_boundary(vid(i, 0), vid(i + 1, 0), Side::bottom, lower(i, 0));
    add_boundary(vid(i, ny), vid(i + 1, ny), Side::top, lower(i, ny - 1) + 1);
  }
  for (int j = 0; j < ny; ++j) {
    add_boundary(vid(0, j), vid(0, j + 1), Side::left, lower(0, j) + 1);
    add_boundary(vid(nx, j), vid(nx, j + 1), Side::right, lower(nx - 1, j));
  }
  return m;
}

/// Uniform refinement of the structured pattern (doubles nx and ny).
inline DomeMesh refine(const DomeMesh& mesh) {
  MeshSpec s = mesh.spec;
  s.nx *= 2;
  s.ny *= 2;
  if (s.borehole_column >= 0) s.borehole_column *= 2;
  return build_dome_mesh(s);
}

}  // namespace icecr
