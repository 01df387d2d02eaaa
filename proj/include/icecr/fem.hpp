/**
 * @file fem.hpp
 * @brief Mixed P2-P0-P1 discretization of the coupled Stokes + damage-advection system.
 *
 * Unknowns are packed into one vector w = [u (P2, interleaved x/y), p (P0), phi (P1)].
 * P2 nodes are the mesh vertices followed by one node per edge.
 *
 * Weak residual, for all test functions (v, q, psi):
 *   (grad v, tau) - (div v, p) - (v, f)                        momentum
 *   (q, div u)                                                 incompressibility
 *   (psi, u.grad phi) + (grad psi, xi grad phi + delta R u) - (psi, s)   damage
 * with tau = (1 - (1 - zeta) phi) mu (|e|^2 + eps)^((1/n - 1)/2) e, e = sym grad u,
 * R = u.grad phi - s (the diffusion term of the strong residual vanishes on P1),
 * and delta = C h / (2 |u| + eps_u).
 */
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "icecr/damage_rate.hpp"
#include "icecr/errors.hpp"
#include "icecr/mesh.hpp"
#include "icecr/models.hpp"

namespace icecr {

inline MeshSpec default_mesh() {
  MeshSpec m;
  m.nx = 20;
  m.ny = 10;
  return m;
}

struct ExperimentConfig {
  MeshSpec mesh = default_mesh();
  double rho = 5.0;  ///< puts the strain-rate norm roughly in [0, 20] on the default dome
  Eigen::Vector2d gravity{0.0, -1.0};
  double xi = 0.05;  ///< damage diffusion
  double truth_transition_width = 0.05;  ///< guard smoothing of the ground-truth damage rate
  int quadrature_order = 4;
  double newton_tolerance = 1e-10;  ///< on ||F|| / ||load||
  int newton_max_iterations = 60;
  int max_halvings = 12;
  double divergence_factor = 1e8;
  double supg_constant = 1.0;
  double supg_velocity_floor = 1e-8;
  GlenParams glen;
  DamageParams damage;  ///< ground-truth rate parameters; zeta also enters the stress

  void validate() const {
    require(xi > 0.0, "damage diffusion xi must be positive");
    require(rho > 0.0, "density must be positive");
    require(truth_transition_width >= 0.0, "transition width must be nonnegative");
    require(mesh.nx >= 2 && mesh.ny >= 2, "mesh resolution must be at least 2 cells per direction");
    require(quadrature_order >= 4 && quadrature_order <= 5, "quadrature order must be 4 or 5");
    require(newton_tolerance > 0.0 && newton_max_iterations > 0, "invalid Newton settings");
    require(supg_constant >= 0.0 && supg_velocity_floor > 0.0, "invalid SUPG settings");
    glen.validate();
    damage.validate();
  }
};

/// Optional replacements for the gravity load; used by manufactured-solution tests.
struct Forcing {
  std::function<Eigen::Vector2d(const Eigen::Vector2d&)> body;
  std::function<Eigen::Vector2d(const Eigen::Vector2d&, Side)> traction;  ///< on stress-free edges
};

// ------------------------------------------------------------------ quadrature

struct TriangleRule {
  std::vector<std::array<double, 2>> points;  ///< (lambda1, lambda2) barycentric
  std::vector<double> weights;                ///< sum to 1 (fraction of the cell area)
};

inline TriangleRule triangle_rule(int order) {
  TriangleRule r;
  auto orbit = [&r](double a, double b, double w) {
    r.points.push_back({a, b});
    r.points.push_back({b, a});
    r.points.push_back({b, b});
    for (int k = 0; k < 3; ++k) r.weights.push_back(w);
  };
  if (order == 4) {
    // Dunavant, degree 4
    orbit(1.0 - 2.0 * 0.445948490915965, 0.445948490915965, 0.223381589678011);
    orbit(1.0 - 2.0 * 0.091576213509771, 0.091576213509771, 0.109951743655322);
  } else if (order == 5) {
    r.points.push_back({1.0 / 3.0, 1.0 / 3.0});
    r.weights.push_back(0.225);
    orbit(0.059715871789770, 0.470142064105115, 0.132394152788506);
    orbit(0.797426985353087, 0.101286507323456, 0.125939180544827);
  } else {
    throw ContractViolation("unsupported triangle quadrature order " + std::to_string(order));
  }
  return r;
}

/// 3-point Gauss-Legendre on [0, 1].
struct LineRule {
  std::array<double, 3> points{0.5 - 0.5 * 0.7745966692414834, 0.5, 0.5 + 0.5 * 0.7745966692414834};
  std::array<double, 3> weights{5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
};

// ------------------------------------------------------------------ discretization

struct QuadPoint {
  double weight = 0.0;  ///< includes the cell area
  Eigen::Vector2d x;
  std::array<double, 6> n2{};
  std::array<Eigen::Vector2d, 6> g2;
  std::array<double, 3> n1{};
  std::array<Eigen::Vector2d, 3> g1;
};

/// P2 basis values/gradients at barycentric coords given barycentric gradients.
inline void p2_basis(const std::array<double, 3>& l, const std::array<Eigen::Vector2d, 3>& gl,
                     std::array<double, 6>& n, std::array<Eigen::Vector2d, 6>& g) {
  for (std::size_t i = 0; i < 3; ++i) {
    n[i] = l[i] * (2.0 * l[i] - 1.0);
    g[i] = (4.0 * l[i] - 1.0) * gl[i];
  }
  constexpr std::array<std::array<std::size_t, 2>, 3> pairs{{{0, 1}, {1, 2}, {2, 0}}};
  for (std::size_t k = 0; k < 3; ++k) {
    const auto [a, b] = pairs[k];
    n[3 + k] = 4.0 * l[a] * l[b];
    g[3 + k] = 4.0 * (l[a] * gl[b] + l[b] * gl[a]);
  }
}

struct ExperimentState {
  Eigen::VectorXd w;
};

class Discretization {
public:
  Discretization(DomeMesh mesh, int quadrature_order) : mesh_(std::move(mesh)) {
    const auto nv = static_cast<Eigen::Index>(mesh_.vertex_count());
    const auto ne = static_cast<Eigen::Index>(mesh_.edge_count());
    const auto nc = static_cast<Eigen::Index>(mesh_.cell_count());
    velocity_nodes_ = nv + ne;
    p_offset_ = 2 * velocity_nodes_;
    phi_offset_ = p_offset_ + nc;
    size_ = phi_offset_ + nv;

    const TriangleRule rule = triangle_rule(quadrature_order);
    nq_ = rule.weights.size();
    qp_.reserve(mesh_.cell_count() * nq_);
    for (std::size_t c = 0; c < mesh_.cell_count(); ++c) {
      const auto gl = barycentric_gradients(c);
      const double area = mesh_.cell_area(c);
      for (std::size_t q = 0; q < nq_; ++q) {
        QuadPoint p;
        const std::array<double, 3> l{1.0 - rule.points[q][0] - rule.points[q][1], rule.points[q][0],
                                      rule.points[q][1]};
        p.weight = rule.weights[q] * area;
        p.x = Eigen::Vector2d::Zero();
        for (std::size_t k = 0; k < 3; ++k) {
          p.x += l[k] * vertex(mesh_.triangles[c][k]);
          p.n1[k] = l[k];
          p.g1[k] = gl[k];
        }
        p2_basis(l, gl, p.n2, p.g2);
        qp_.push_back(p);
      }
    }

    dirichlet_.assign(static_cast<std::size_t>(size_), 0);
    for (const auto& be : mesh_.boundary) {
      const auto& e = mesh_.edges[static_cast<std::size_t>(be.edge)];
      const std::array<Eigen::Index, 3> nodes{e[0], e[1], nv + be.edge};
      if (be.velocity == VelocityTag::no_slip) {
        for (auto n : nodes) dirichlet_[static_cast<std::size_t>(u_dof(n, 0))] = dirichlet_[static_cast<std::size_t>(u_dof(n, 1))] = 1;
      } else if (be.velocity == VelocityTag::symmetry) {
        for (auto n : nodes) dirichlet_[static_cast<std::size_t>(u_dof(n, 0))] = 1;
      }
      if (be.damage == DamageTag::dirichlet) {
        dirichlet_[static_cast<std::size_t>(phi_dof(e[0]))] = dirichlet_[static_cast<std::size_t>(phi_dof(e[1]))] = 1;
      }
    }
  }

  [[nodiscard]] const DomeMesh& mesh() const { return mesh_; }
  [[nodiscard]] Eigen::Index size() const { return size_; }
  [[nodiscard]] Eigen::Index velocity_nodes() const { return velocity_nodes_; }
  [[nodiscard]] Eigen::Index velocity_size() const { return 2 * velocity_nodes_; }
  [[nodiscard]] Eigen::Index pressure_offset() const { return p_offset_; }
  [[nodiscard]] Eigen::Index damage_offset() const { return phi_offset_; }
  [[nodiscard]] Eigen::Index u_dof(Eigen::Index node, int comp) const { return 2 * node + comp; }
  [[nodiscard]] Eigen::Index p_dof(Eigen::Index cell) const { return p_offset_ + cell; }
  [[nodiscard]] Eigen::Index phi_dof(Eigen::Index vertex) const { return phi_offset_ + vertex; }
  [[nodiscard]] std::size_t quad_per_cell() const { return nq_; }
  [[nodiscard]] const QuadPoint& quad(std::size_t cell, std::size_t q) const { return qp_[cell * nq_ + q]; }
  [[nodiscard]] bool is_dirichlet(Eigen::Index dof) const { return dirichlet_[static_cast<std::size_t>(dof)] != 0; }
  [[nodiscard]] const std::vector<char>& dirichlet_mask() const { return dirichlet_; }

  [[nodiscard]] Eigen::Vector2d vertex(int v) const { return mesh_.vertices[static_cast<std::size_t>(v)]; }

  [[nodiscard]] Eigen::Vector2d node_coordinate(Eigen::Index node) const {
    const auto nv = static_cast<Eigen::Index>(mesh_.vertex_count());
    if (node < nv) return mesh_.vertices[static_cast<std::size_t>(node)];
    return mesh_.edge_midpoint(static_cast<std::size_t>(node - nv));
  }

  /// Local P2 node order: 3 vertices, then edges (0,1), (1,2), (2,0).
  [[nodiscard]] std::array<Eigen::Index, 6> p2_nodes(std::size_t cell) const {
    const auto& t = mesh_.triangles[cell];
    const auto& te = mesh_.triangle_edges[cell];
    const auto nv = static_cast<Eigen::Index>(mesh_.vertex_count());
    return {t[0], t[1], t[2], nv + te[0], nv + te[1], nv + te[2]};
  }

  [[nodiscard]] ExperimentState zero_state() const { return {Eigen::VectorXd::Zero(size_)}; }

private:
  [[nodiscard]] std::array<Eigen::Vector2d, 3> barycentric_gradients(std::size_t c) const {
    const auto& t = mesh_.triangles[c];
    const Eigen::Vector2d p0 = vertex(t[0]), p1 = vertex(t[1]), p2 = vertex(t[2]);
    const double det = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p2.x() - p0.x()) * (p1.y() - p0.y());
    // grad lambda_k = perp(opposite edge) / det
    std::array<Eigen::Vector2d, 3> g;
    g[0] = Eigen::Vector2d(p1.y() - p2.y(), p2.x() - p1.x()) / det;
    g[1] = Eigen::Vector2d(p2.y() - p0.y(), p0.x() - p2.x()) / det;
    g[2] = Eigen::Vector2d(p0.y() - p1.y(), p1.x() - p0.x()) / det;
    return g;
  }

  DomeMesh mesh_;
  Eigen::Index velocity_nodes_ = 0;
  Eigen::Index p_offset_ = 0;
  Eigen::Index phi_offset_ = 0;
  Eigen::Index size_ = 0;
  std::size_t nq_ = 0;
  std::vector<QuadPoint> qp_;
  std::vector<char> dirichlet_;
};

/// Field values at one quadrature point.
struct PointValues {
  Eigen::Vector2d u = Eigen::Vector2d::Zero();
  Eigen::Matrix2d grad_u = Eigen::Matrix2d::Zero();  ///< (i, j) = d u_i / d x_j
  double phi = 0.0;
  Eigen::Vector2d grad_phi = Eigen::Vector2d::Zero();
  double p = 0.0;

  [[nodiscard]] Eigen::Matrix2d strain_rate() const { return 0.5 * (grad_u + grad_u.transpose()); }
};

inline PointValues point_values(const Discretization& d, const Eigen::VectorXd& w, std::size_t cell, std::size_t q) {
  const auto& qp = d.quad(cell, q);
  const auto nodes = d.p2_nodes(cell);
  PointValues v;
  for (std::size_t a = 0; a < 6; ++a) {
    const Eigen::Vector2d ua(w(d.u_dof(nodes[a], 0)), w(d.u_dof(nodes[a], 1)));
    v.u += qp.n2[a] * ua;
    v.grad_u += ua * qp.g2[a].transpose();
  }
  const auto& t = d.mesh().triangles[cell];
  for (std::size_t b = 0; b < 3; ++b) {
    const double pb = w(d.phi_dof(t[b]));
    v.phi += qp.n1[b] * pb;
    v.grad_phi += pb * qp.g1[b];
  }
  v.p = w(d.p_dof(static_cast<Eigen::Index>(cell)));
  return v;
}

inline double strain_rate_norm(const Eigen::Matrix2d& e) {
  return std::sqrt(e(0, 0) * e(0, 0) + 2.0 * e(0, 1) * e(0, 1) + e(1, 1) * e(1, 1));
}

/// (J2, phi) at every quadrature point, cell-major.
inline Eigen::MatrixXd rate_inputs(const Discretization& d, const Eigen::VectorXd& w) {
  const std::size_t nq = d.quad_per_cell();
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(d.mesh().cell_count() * nq), 2);
  for (std::size_t c = 0; c < d.mesh().cell_count(); ++c)
    for (std::size_t q = 0; q < nq; ++q) {
      const auto v = point_values(d, w, c, q);
      const auto r = static_cast<Eigen::Index>(c * nq + q);
      rows(r, 0) = strain_rate_norm(v.strain_rate());
      rows(r, 1) = v.phi;
    }
  return rows;
}

inline double supg_delta(const ExperimentConfig& cfg, double h, double speed) {
  return cfg.supg_constant * h / (2.0 * speed + cfg.supg_velocity_floor);
}

/// Residual and (optionally) Jacobian of the coupled system. Dirichlet rows are
/// replaced by w_i (homogeneous data); Dirichlet columns are dropped from other rows.
class Assembler {
public:
  Assembler(const Discretization& disc, const ExperimentConfig& cfg, const DamageRateModel& rate,
            const Forcing* forcing = nullptr)
      : d_(disc), cfg_(cfg), rate_(rate), forcing_(forcing) {}

  [[nodiscard]] Eigen::Vector2d body_force(const Eigen::Vector2d& x) const {
    if (forcing_ != nullptr && forcing_->body) return forcing_->body(x);
    return cfg_.rho * cfg_.gravity;
  }

  /// Norm of the external load vector over free dofs; the residual scale.
  [[nodiscard]] double load_norm() const {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(d_.size());
    add_loads(b, 1.0);
    for (Eigen::Index i = 0; i < b.size(); ++i)
      if (d_.is_dirichlet(i)) b(i) = 0.0;
    const double n = b.norm();
    return n > 0.0 ? n : 1.0;
  }

  void residual(const Eigen::VectorXd& w, Eigen::VectorXd& f) const { assemble(w, f, nullptr); }

  void assemble(const Eigen::VectorXd& w, Eigen::VectorXd& f, Eigen::SparseMatrix<double>* jac) const {
    const auto n = d_.size();
    f.setZero(n);
    const std::size_t nq = d_.quad_per_cell();
    const RateBatch rates = rate_.evaluate(rate_inputs(d_, w));
    const double zeta = cfg_.damage.zeta;
    const auto& gp = cfg_.glen;
    const double m = 0.5 * (1.0 / gp.n - 1.0);

    std::vector<Eigen::Triplet<double>> trip;
    if (jac != nullptr) trip.reserve(d_.mesh().cell_count() * (21 * 21 + 64));
    auto add = [&](Eigen::Index r, Eigen::Index c, double v) {
      if (d_.is_dirichlet(r) || d_.is_dirichlet(c)) return;
      trip.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
    };

    for (std::size_t c = 0; c < d_.mesh().cell_count(); ++c) {
      const auto nodes = d_.p2_nodes(c);
      const auto& tri = d_.mesh().triangles[c];
      const double h = d_.mesh().cell_diameter(c);
      const Eigen::Index pd = d_.p_dof(static_cast<Eigen::Index>(c));
      std::array<Eigen::Index, 12> ud{};
      for (std::size_t a = 0; a < 6; ++a) {
        ud[2 * a] = d_.u_dof(nodes[a], 0);
        ud[2 * a + 1] = d_.u_dof(nodes[a], 1);
      }
      std::array<Eigen::Index, 3> fd{d_.phi_dof(tri[0]), d_.phi_dof(tri[1]), d_.phi_dof(tri[2])};

      for (std::size_t q = 0; q < nq; ++q) {
        const auto& qp = d_.quad(c, q);
        const auto v = point_values(d_, w, c, q);
        const double wq = qp.weight;
        const Eigen::Matrix2d e = v.strain_rate();
        const double j2sq = e(0, 0) * e(0, 0) + 2.0 * e(0, 1) * e(0, 1) + e(1, 1) * e(1, 1);
        const double j2 = std::sqrt(j2sq);
        const double soft = 1.0 - (1.0 - zeta) * v.phi;
        const double base = gp.mu * std::pow(j2sq + gp.eps_reg, m);
        const double eta = soft * base;
        const double eta_j = soft * gp.mu * m * std::pow(j2sq + gp.eps_reg, m - 1.0);  // d eta / d(J2^2)
        const double eta_phi = -(1.0 - zeta) * base;
        const Eigen::Matrix2d tau = eta * e;
        const Eigen::Vector2d fb = body_force(qp.x);

        const auto r = static_cast<Eigen::Index>(c * nq + q);
        const double s = rates.value(r);
        const double s_j = rates.d_j2(r);
        const double s_phi = rates.d_phi(r);
        const double speed = v.u.norm();
        const double delta = supg_delta(cfg_, h, speed);
        const double adv = v.u.dot(v.grad_phi);
        const double strong = adv - s;

        // e : d e for a unit change of velocity dof (a, k) is sum_j e(k, j) dN_a/dx_j
        std::array<double, 12> e_de{};
        std::array<double, 12> tau_dv{};  // tau : grad v for v = N_a e_k
        std::array<double, 12> e_dv{};    // e : grad v
        for (std::size_t a = 0; a < 6; ++a)
          for (int k = 0; k < 2; ++k) {
            const std::size_t idx = 2 * a + static_cast<std::size_t>(k);
            e_de[idx] = e.row(k).dot(qp.g2[a]);
            e_dv[idx] = e_de[idx];
            tau_dv[idx] = tau.row(k).dot(qp.g2[a]);
          }

        // momentum
        for (std::size_t a = 0; a < 6; ++a)
          for (int i = 0; i < 2; ++i) {
            const std::size_t ia = 2 * a + static_cast<std::size_t>(i);
            f(ud[ia]) += wq * (tau_dv[ia] - v.p * qp.g2[a](i) - qp.n2[a] * fb(i));
          }
        // incompressibility
        f(pd) += wq * v.grad_u.trace();
        // damage
        std::array<double, 3> u_dpsi{};
        for (std::size_t b = 0; b < 3; ++b) {
          u_dpsi[b] = v.u.dot(qp.g1[b]);
          f(fd[b]) += wq * (qp.n1[b] * adv + cfg_.xi * qp.g1[b].dot(v.grad_phi) + delta * strong * u_dpsi[b] -
                            qp.n1[b] * s);
        }

        if (jac == nullptr) continue;

        // d/d u_(c,k)
        for (std::size_t cn = 0; cn < 6; ++cn)
          for (int k = 0; k < 2; ++k) {
            const std::size_t ck = 2 * cn + static_cast<std::size_t>(k);
            const Eigen::Index col = ud[ck];
            for (std::size_t a = 0; a < 6; ++a)
              for (int i = 0; i < 2; ++i) {
                const std::size_t ia = 2 * a + static_cast<std::size_t>(i);
                // sum_j de_ij dN_a/dx_j with de = sym(e_k (x) grad N_c)
                const double de_dv = 0.5 * ((i == k ? qp.g2[cn].dot(qp.g2[a]) : 0.0) + qp.g2[cn](i) * qp.g2[a](k));
                const double val = eta * de_dv + 2.0 * eta_j * e_de[ck] * e_dv[ia];
                add(ud[ia], col, wq * val);
              }
            add(pd, col, wq * qp.g2[cn](k));
            const double dj2 = j2 > 0.0 ? e_de[ck] / j2 : 0.0;
            const double dspeed = speed > 0.0 ? v.u(k) / speed * qp.n2[cn] : 0.0;
            const double ddelta =
                -cfg_.supg_constant * h * 2.0 * dspeed / std::pow(2.0 * speed + cfg_.supg_velocity_floor, 2);
            const double dadv = qp.n2[cn] * v.grad_phi(k);
            const double dstrong = dadv - s_j * dj2;
            for (std::size_t b = 0; b < 3; ++b) {
              const double du_dpsi = qp.n2[cn] * qp.g1[b](k);
              const double val = qp.n1[b] * dadv + ddelta * strong * u_dpsi[b] + delta * dstrong * u_dpsi[b] +
                                 delta * strong * du_dpsi - qp.n1[b] * s_j * dj2;
              add(fd[b], col, wq * val);
            }
          }
        // d/d p
        for (std::size_t a = 0; a < 6; ++a)
          for (int i = 0; i < 2; ++i) add(ud[2 * a + static_cast<std::size_t>(i)], pd, -wq * qp.g2[a](i));
        // d/d phi_d
        for (std::size_t dn = 0; dn < 3; ++dn) {
          const Eigen::Index col = fd[dn];
          for (std::size_t a = 0; a < 6; ++a)
            for (int i = 0; i < 2; ++i) {
              const std::size_t ia = 2 * a + static_cast<std::size_t>(i);
              add(ud[ia], col, wq * eta_phi * qp.n1[dn] * e_dv[ia]);
            }
          const double dadv = v.u.dot(qp.g1[dn]);
          const double dstrong = dadv - s_phi * qp.n1[dn];
          for (std::size_t b = 0; b < 3; ++b) {
            const double val = qp.n1[b] * dadv + cfg_.xi * qp.g1[b].dot(qp.g1[dn]) + delta * dstrong * u_dpsi[b] -
                               qp.n1[b] * s_phi * qp.n1[dn];
            add(fd[b], col, wq * val);
          }
        }
      }
    }

    if (forcing_ != nullptr && forcing_->traction) add_tractions(f, -1.0);

    for (Eigen::Index i = 0; i < n; ++i)
      if (d_.is_dirichlet(i)) {
        f(i) = w(i);
        if (jac != nullptr) trip.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
      }
    if (jac != nullptr) {
      jac->resize(n, n);
      jac->setFromTriplets(trip.begin(), trip.end());
    }
  }

  /// Residual derivative with respect to the rate at each quadrature point:
  /// dF_b / ds_q = -w_q (psi_b + delta u.grad psi_b), returned as a sparse (dofs x points) matrix.
  [[nodiscard]] Eigen::SparseMatrix<double> rate_sensitivity(const Eigen::VectorXd& w) const {
    const std::size_t nq = d_.quad_per_cell();
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t c = 0; c < d_.mesh().cell_count(); ++c) {
      const auto& tri = d_.mesh().triangles[c];
      const double h = d_.mesh().cell_diameter(c);
      for (std::size_t q = 0; q < nq; ++q) {
        const auto& qp = d_.quad(c, q);
        const auto v = point_values(d_, w, c, q);
        const double delta = supg_delta(cfg_, h, v.u.norm());
        for (std::size_t b = 0; b < 3; ++b) {
          const Eigen::Index row = d_.phi_dof(tri[b]);
          if (d_.is_dirichlet(row)) continue;
          trip.emplace_back(static_cast<int>(row), static_cast<int>(c * nq + q),
                            -qp.weight * (qp.n1[b] + delta * v.u.dot(qp.g1[b])));
        }
      }
    }
    Eigen::SparseMatrix<double> m(d_.size(), static_cast<Eigen::Index>(d_.mesh().cell_count() * nq));
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
  }

private:
  void add_loads(Eigen::VectorXd& b, double sign) const {
    const std::size_t nq = d_.quad_per_cell();
    for (std::size_t c = 0; c < d_.mesh().cell_count(); ++c) {
      const auto nodes = d_.p2_nodes(c);
      for (std::size_t q = 0; q < nq; ++q) {
        const auto& qp = d_.quad(c, q);
        const Eigen::Vector2d fb = body_force(qp.x);
        for (std::size_t a = 0; a < 6; ++a)
          for (int i = 0; i < 2; ++i) b(d_.u_dof(nodes[a], i)) += sign * qp.weight * qp.n2[a] * fb(i);
      }
    }
    if (forcing_ != nullptr && forcing_->traction) add_tractions(b, sign);
  }

  void add_tractions(Eigen::VectorXd& b, double sign) const {
    const LineRule line;
    const auto nv = static_cast<Eigen::Index>(d_.mesh().vertex_count());
    for (const auto& be : d_.mesh().boundary) {
      if (be.velocity != VelocityTag::stress_free) continue;
      const auto& e = d_.mesh().edges[static_cast<std::size_t>(be.edge)];
      const Eigen::Vector2d a = d_.vertex(e[0]), c = d_.vertex(e[1]);
      const double len = (c - a).norm();
      const std::array<Eigen::Index, 3> nodes{e[0], e[1], nv + be.edge};
      for (std::size_t q = 0; q < 3; ++q) {
        const double t = line.points[q];
        const Eigen::Vector2d x = (1.0 - t) * a + t * c;
        const std::array<double, 3> shape{(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)};
        const Eigen::Vector2d tr = forcing_->traction(x, be.side);
        for (std::size_t k = 0; k < 3; ++k)
          for (int i = 0; i < 2; ++i) b(d_.u_dof(nodes[k], i)) += sign * line.weights[q] * len * shape[k] * tr(i);
      }
    }
  }

  const Discretization& d_;
  const ExperimentConfig& cfg_;
  const DamageRateModel& rate_;
  const Forcing* forcing_;
};

// ------------------------------------------------------------------ forward solve

enum class FailureKind { none, diverged, singular_jacobian, residual_stall, nonpositive_viscosity };

inline std::string to_string(FailureKind k) {
  switch (k) {
    case FailureKind::none: return "none";
    case FailureKind::diverged: return "diverged";
    case FailureKind::singular_jacobian: return "singular_jacobian";
    case FailureKind::residual_stall: return "residual_stall";
    case FailureKind::nonpositive_viscosity: return "nonpositive_viscosity";
  }
  return "?";
}

struct SolveOutcome {
  std::optional<ExperimentState> state;  ///< the last iterate (present also for failed solves)
  bool converged = false;
  double relative_residual = 0.0;
  int newton_iterations = 0;
  FailureKind failure_kind = FailureKind::none;
};

inline double free_norm(const Eigen::VectorXd& f) { return f.norm(); }

/// Damped Newton with residual-monotone backtracking.
inline SolveOutcome newton_solve(const Discretization& disc, const ExperimentConfig& cfg, const DamageRateModel& rate,
                                 Eigen::VectorXd w, const Forcing* forcing = nullptr) {
  Assembler as(disc, cfg, rate, forcing);
  const double scale = as.load_norm();
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (disc.is_dirichlet(i)) w(i) = 0.0;

  SolveOutcome out;
  Eigen::VectorXd f;
  as.residual(w, f);
  double fn = free_norm(f);
  const double f0 = fn;
  Eigen::SparseMatrix<double> jac;
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
  bool analyzed = false;

  auto finish = [&](FailureKind kind) {
    out.relative_residual = std::isfinite(fn) ? fn / scale : std::numeric_limits<double>::infinity();
    out.failure_kind = kind;
    out.converged = kind == FailureKind::none;
    out.state = ExperimentState{w};
    return out;
  };

  if (!std::isfinite(fn)) return finish(FailureKind::diverged);
  for (int it = 0;; ++it) {
    out.newton_iterations = it;
    if (fn / scale <= cfg.newton_tolerance) {
      const double phi_max = w.tail(static_cast<Eigen::Index>(disc.mesh().vertex_count())).maxCoeff();
      if (phi_max * (1.0 - cfg.damage.zeta) >= 1.0) return finish(FailureKind::nonpositive_viscosity);
      return finish(FailureKind::none);
    }
    if (it >= cfg.newton_max_iterations) return finish(FailureKind::residual_stall);

    as.assemble(w, f, &jac);
    if (!analyzed) {
      lu.analyzePattern(jac);
      analyzed = true;
    }
    lu.factorize(jac);
    if (lu.info() != Eigen::Success) return finish(FailureKind::singular_jacobian);
    const Eigen::VectorXd dw = lu.solve(-f);
    if (lu.info() != Eigen::Success || !dw.allFinite()) return finish(FailureKind::singular_jacobian);

    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd trial;
    Eigen::VectorXd ft;
    for (int k = 0; k <= cfg.max_halvings; ++k, t *= 0.5) {
      trial = w + t * dw;
      as.residual(trial, ft);
      const double ftn = free_norm(ft);
      if (std::isfinite(ftn) && ftn < fn) {
        w = std::move(trial);
        f = std::move(ft);
        fn = ftn;
        accepted = true;
        break;
      }
    }
    if (!accepted) return finish(FailureKind::residual_stall);
    if (fn > cfg.divergence_factor * f0) return finish(FailureKind::diverged);
  }
}

/// Linear-viscosity Stokes solution (n = 1) with zero damage; a starting point for the Glen solve.
inline Eigen::VectorXd linear_stokes_guess(const Discretization& disc, const ExperimentConfig& cfg,
                                           const Forcing* forcing = nullptr) {
  ExperimentConfig lin = cfg;
  lin.glen.n = 1.0;
  const ConstantRate zero(0.0);
  auto o = newton_solve(disc, lin, zero, Eigen::VectorXd::Zero(disc.size()), forcing);
  return o.state->w;
}

/// Zero-damage Glen solution.
inline SolveOutcome glen_solution(const Discretization& disc, const ExperimentConfig& cfg) {
  const ConstantRate zero(0.0);
  return newton_solve(disc, cfg, zero, linear_stokes_guess(disc, cfg));
}

/// Coupled forward solve. Without an initial guess, starts from the zero-damage Glen solution.
inline SolveOutcome solve_forward(const Discretization& disc, const ExperimentConfig& cfg, const DamageRateModel& rate,
                                  const std::optional<ExperimentState>& initial_guess = std::nullopt) {
  if (initial_guess) return newton_solve(disc, cfg, rate, initial_guess->w);
  const auto glen = glen_solution(disc, cfg);
  if (!glen.converged) return glen;
  return newton_solve(disc, cfg, rate, glen.state->w);
}

inline AlbrechtLevermannRate truth_rate(const ExperimentConfig& cfg) {
  return AlbrechtLevermannRate(cfg.damage, cfg.truth_transition_width);
}

/// Ground-truth solve. Falls back to continuation in the source strength if the direct solve fails.
inline SolveOutcome solve_truth(const Discretization& disc, const ExperimentConfig& cfg, int continuation_steps = 10) {
  const auto rate = truth_rate(cfg);
  const auto glen = glen_solution(disc, cfg);
  if (!glen.converged) return glen;
  auto direct = newton_solve(disc, cfg, rate, glen.state->w);
  if (direct.converged) return direct;
  Eigen::VectorXd w = glen.state->w;
  SolveOutcome o;
  for (int k = 1; k <= continuation_steps; ++k) {
    const ScaledRate scaled(rate, static_cast<double>(k) / continuation_steps);
    o = newton_solve(disc, cfg, scaled, w);
    if (!o.converged) return o;
    w = o.state->w;
  }
  return o;
}

// ------------------------------------------------------------------ invariant sampling

enum class StrainRegime { small, large };

struct InvariantSample {
  double j1 = 0.0;  ///< tr e
  double j2 = 0.0;  ///< sqrt(tr e^2)
  double phi = 0.0;
  double weight = 0.0;
  StrainRegime regime = StrainRegime::small;
  int cell = -1;
  Eigen::Vector2d x = Eigen::Vector2d::Zero();
};

inline constexpr double regime_split_j2() { return 4.47213595499957939282; }  // sqrt(20)

/// One row per quadrature point outside the bed/front corner cells.
inline std::vector<InvariantSample> sample_invariants(const Discretization& d, const SolveOutcome& outcome) {
  require(outcome.converged && outcome.state.has_value(), "invariants can only be sampled from a converged solve");
  const auto& w = outcome.state->w;
  std::vector<InvariantSample> rows;
  for (std::size_t c = 0; c < d.mesh().cell_count(); ++c) {
    if (d.mesh().corner_excluded[c] != 0) continue;
    for (std::size_t q = 0; q < d.quad_per_cell(); ++q) {
      const auto v = point_values(d, w, c, q);
      const Eigen::Matrix2d e = v.strain_rate();
      InvariantSample s;
      s.j1 = e.trace();
      s.j2 = strain_rate_norm(e);
      s.phi = v.phi;
      s.weight = d.quad(c, q).weight;
      s.regime = s.j2 <= regime_split_j2() ? StrainRegime::small : StrainRegime::large;
      s.cell = static_cast<int>(c);
      s.x = d.quad(c, q).x;
      rows.push_back(s);
    }
  }
  return rows;
}

/// N x 2 matrix of (J2, phi) from samples.
inline Eigen::MatrixXd invariant_matrix(const std::vector<InvariantSample>& rows) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = rows[i].j2;
    m(static_cast<Eigen::Index>(i), 1) = rows[i].phi;
  }
  return m;
}

}  // namespace icecr
