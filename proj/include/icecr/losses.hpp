/**
 * @file losses.hpp
 * @brief Observation operators, synthetic noise, experimental misfits and the invariant-space loss.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "icecr/adjoint.hpp"
#include "icecr/damage_rate.hpp"
#include "icecr/fem.hpp"

namespace icecr {

enum class Observer { interior, surface, surface_plus_borehole };

inline std::string to_string(Observer o) {
  switch (o) {
    case Observer::interior: return "interior";
    case Observer::surface: return "surface";
    case Observer::surface_plus_borehole: return "surface-borehole";
  }
  return "?";
}

inline Observer parse_observer(const std::string& s) {
  if (s == "interior") return Observer::interior;
  if (s == "surface") return Observer::surface;
  if (s == "surface-borehole" || s == "surface_plus_borehole" || s == "surface+borehole")
    return Observer::surface_plus_borehole;
  throw ContractViolation("unknown observer '" + s + "'");
}

struct LossSpec {
  Observer observer = Observer::interior;
  double gamma_u = 1.0;
  double gamma_p = 1.0;
  double failed_solve_loss = default_failed_solve_loss;

  void validate() const {
    require(gamma_u > 0.0 && gamma_p > 0.0, "borehole scalings must be positive");
    require(failed_solve_loss > 0.0, "failed-solve loss must be positive");
  }
};

/// Noisy copies of the truth velocity and pressure (the damage block is carried but unused).
struct ObservationSet {
  Eigen::VectorXd w;
  double delta = 0.0;
  std::uint64_t seed = 0;
};

/// u~ = u (1 + d_u) per P2 node, p~ = p + d_p (max p - min p) per cell, d ~ N(0, delta).
inline ObservationSet add_noise(const Discretization& d, const Eigen::VectorXd& truth, double delta, std::uint64_t seed) {
  require(delta >= 0.0, "noise proportion must be nonnegative");
  require(truth.size() == d.size(), "truth state does not match the discretization");
  ObservationSet obs{truth, delta, seed};
  if (delta == 0.0) return obs;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, delta);
  for (Eigen::Index n = 0; n < d.velocity_nodes(); ++n) {
    const double f = 1.0 + normal(rng);
    obs.w(d.u_dof(n, 0)) *= f;
    obs.w(d.u_dof(n, 1)) *= f;
  }
  const auto nc = static_cast<Eigen::Index>(d.mesh().cell_count());
  const auto p = truth.segment(d.pressure_offset(), nc);
  const double range = p.maxCoeff() - p.minCoeff();
  for (Eigen::Index c = 0; c < nc; ++c) obs.w(d.p_dof(c)) += normal(rng) * range;
  return obs;
}

namespace detail {

/// Accumulates weight * (|u - u~|^2 + (p - p~)^2) over a cell and, optionally, its state gradient.
inline double cell_misfit(const Discretization& d, std::size_t c, const Eigen::VectorXd& w, const Eigen::VectorXd& obs,
                          double gu, double gp, Eigen::VectorXd* grad) {
  const auto nodes = d.p2_nodes(c);
  const Eigen::Index pd = d.p_dof(static_cast<Eigen::Index>(c));
  const double ep = w(pd) - obs(pd);
  double total = 0.0;
  for (std::size_t q = 0; q < d.quad_per_cell(); ++q) {
    const auto& qp = d.quad(c, q);
    Eigen::Vector2d eu = Eigen::Vector2d::Zero();
    for (std::size_t a = 0; a < 6; ++a)
      for (int i = 0; i < 2; ++i) {
        const auto k = d.u_dof(nodes[a], i);
        eu(i) += qp.n2[a] * (w(k) - obs(k));
      }
    total += qp.weight * (gu * eu.squaredNorm() + gp * ep * ep);
    if (grad != nullptr) {
      for (std::size_t a = 0; a < 6; ++a)
        for (int i = 0; i < 2; ++i) (*grad)(d.u_dof(nodes[a], i)) += 2.0 * qp.weight * gu * qp.n2[a] * eu(i);
      (*grad)(pd) += 2.0 * qp.weight * gp * ep;
    }
  }
  return total;
}

/// Same integrand over the top-surface edges; pressure from the adjacent cell.
inline double surface_misfit(const Discretization& d, const Eigen::VectorXd& w, const Eigen::VectorXd& obs,
                             Eigen::VectorXd* grad) {
  const LineRule line;
  const auto nv = static_cast<Eigen::Index>(d.mesh().vertex_count());
  double total = 0.0;
  for (const auto& be : d.mesh().boundary) {
    if (!be.top_surface) continue;
    const auto& e = d.mesh().edges[static_cast<std::size_t>(be.edge)];
    const double len = (d.vertex(e[1]) - d.vertex(e[0])).norm();
    const std::array<Eigen::Index, 3> nodes{e[0], e[1], nv + be.edge};
    const Eigen::Index pd = d.p_dof(be.cell);
    const double ep = w(pd) - obs(pd);
    for (std::size_t q = 0; q < 3; ++q) {
      const double t = line.points[q];
      const std::array<double, 3> shape{(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)};
      const double wq = line.weights[q] * len;
      Eigen::Vector2d eu = Eigen::Vector2d::Zero();
      for (std::size_t a = 0; a < 3; ++a)
        for (int i = 0; i < 2; ++i) {
          const auto k = d.u_dof(nodes[a], i);
          eu(i) += shape[a] * (w(k) - obs(k));
        }
      total += wq * (eu.squaredNorm() + ep * ep);
      if (grad != nullptr) {
        for (std::size_t a = 0; a < 3; ++a)
          for (int i = 0; i < 2; ++i) (*grad)(d.u_dof(nodes[a], i)) += 2.0 * wq * shape[a] * eu(i);
        (*grad)(pd) += 2.0 * wq * ep;
      }
    }
  }
  return total;
}

inline double misfit(const Discretization& d, const Eigen::VectorXd& w, const ObservationSet& obs, const LossSpec& spec,
                     Eigen::VectorXd* grad) {
  require(w.size() == d.size() && obs.w.size() == d.size(), "state and observations must share the mesh");
  if (grad != nullptr) grad->setZero(d.size());
  double total = 0.0;
  switch (spec.observer) {
    case Observer::interior:
      for (std::size_t c = 0; c < d.mesh().cell_count(); ++c) total += cell_misfit(d, c, w, obs.w, 1.0, 1.0, grad);
      break;
    case Observer::surface: total = surface_misfit(d, w, obs.w, grad); break;
    case Observer::surface_plus_borehole:
      total = surface_misfit(d, w, obs.w, grad);
      for (std::size_t c = 0; c < d.mesh().cell_count(); ++c)
        if (d.mesh().borehole[c] != 0) total += cell_misfit(d, c, w, obs.w, spec.gamma_u, spec.gamma_p, grad);
      break;
  }
  return total;
}

}  // namespace detail

inline double experimental_loss(const Discretization& d, const Eigen::VectorXd& w, const ObservationSet& obs,
                                const LossSpec& spec) {
  return detail::misfit(d, w, obs, spec, nullptr);
}

class ExperimentalLoss final : public StateFunctional {
public:
  ExperimentalLoss(const Discretization& d, ObservationSet obs, LossSpec spec)
      : d_(d), obs_(std::move(obs)), spec_(spec) {
    spec_.validate();
  }
  [[nodiscard]] double value(const Eigen::VectorXd& w) const override { return detail::misfit(d_, w, obs_, spec_, nullptr); }
  [[nodiscard]] Eigen::VectorXd state_gradient(const Eigen::VectorXd& w) const override {
    Eigen::VectorXd g;
    detail::misfit(d_, w, obs_, spec_, &g);
    return g;
  }
  [[nodiscard]] const LossSpec& spec() const { return spec_; }
  [[nodiscard]] const ObservationSet& observations() const { return obs_; }

private:
  const Discretization& d_;
  ObservationSet obs_;
  LossSpec spec_;
};

/// (gamma_u, gamma_p) = (1 / int_B |u0|^2, 1 / int_B p0^2).
inline std::pair<double, double> set_borehole_scalings(const Discretization& d, const Eigen::VectorXd& truth) {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(d.size());
  double iu = 0.0, ip = 0.0;
  for (std::size_t c = 0; c < d.mesh().cell_count(); ++c) {
    if (d.mesh().borehole[c] == 0) continue;
    iu += detail::cell_misfit(d, c, truth, zero, 1.0, 0.0, nullptr);
    ip += detail::cell_misfit(d, c, truth, zero, 0.0, 1.0, nullptr);
  }
  constexpr double floor = std::numeric_limits<double>::min();
  return {1.0 / std::max(iu, floor), 1.0 / std::max(ip, floor)};
}

// ------------------------------------------------------------------ invariant loss

struct InvariantRegimeGrid {
  StrainRegime regime = StrainRegime::small;
  Eigen::VectorXd j2;   ///< node coordinates
  Eigen::VectorXd phi;  ///< node coordinates
  Eigen::MatrixXd weight;  ///< (j2 index, phi index)
};

struct InvariantDomainGrid {
  std::vector<InvariantRegimeGrid> regimes;

  /// All nodes as rows (J2, phi), regime-major, then J2-major.
  [[nodiscard]] Eigen::MatrixXd nodes() const {
    Eigen::Index n = 0;
    for (const auto& r : regimes) n += r.j2.size() * r.phi.size();
    Eigen::MatrixXd m(n, 2);
    Eigen::Index k = 0;
    for (const auto& r : regimes)
      for (Eigen::Index i = 0; i < r.j2.size(); ++i)
        for (Eigen::Index j = 0; j < r.phi.size(); ++j, ++k) m.row(k) << r.j2(i), r.phi(j);
    return m;
  }
  [[nodiscard]] Eigen::VectorXd weights() const {
    std::vector<double> w;
    for (const auto& r : regimes)
      for (Eigen::Index i = 0; i < r.j2.size(); ++i)
        for (Eigen::Index j = 0; j < r.phi.size(); ++j) w.push_back(r.weight(i, j));
    return Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  }
  [[nodiscard]] std::vector<StrainRegime> node_regimes() const {
    std::vector<StrainRegime> out;
    for (const auto& r : regimes) out.insert(out.end(), static_cast<std::size_t>(r.j2.size() * r.phi.size()), r.regime);
    return out;
  }
};

struct InvariantGridSettings {
  int j2_nodes = 64;
  int phi_nodes = 32;
  double margin = 0.1;  ///< fraction of the data range added on each side
  double large_regime_max = std::sqrt(450.0);
};

/// Uniform grids per regime, covering the sampled data plus a margin and clipped to the regime bounds.
inline InvariantDomainGrid make_invariant_grid(const std::vector<InvariantSample>& samples,
                                               const InvariantGridSettings& s = {}) {
  require(s.j2_nodes >= 2 && s.phi_nodes >= 2, "invariant grid needs at least 2 nodes per axis");
  InvariantDomainGrid grid;
  const std::array<std::pair<StrainRegime, std::pair<double, double>>, 2> bounds{
      {{StrainRegime::small, {0.0, regime_split_j2()}}, {StrainRegime::large, {regime_split_j2(), s.large_regime_max}}}};
  for (const auto& [regime, b] : bounds) {
    double jlo = std::numeric_limits<double>::infinity(), jhi = -jlo, plo = jlo, phi_hi = -jlo;
    for (const auto& r : samples) {
      if (r.regime != regime) continue;
      jlo = std::min(jlo, r.j2);
      jhi = std::max(jhi, r.j2);
      plo = std::min(plo, r.phi);
      phi_hi = std::max(phi_hi, r.phi);
    }
    InvariantRegimeGrid g;
    g.regime = regime;
    double a = b.first, z = b.second, pa = 0.0, pz = 1.0;
    if (std::isfinite(jlo)) {
      const double jm = s.margin * std::max(jhi - jlo, 0.05 * (b.second - b.first));
      const double pm = s.margin * std::max(phi_hi - plo, 0.05);
      a = std::max(b.first, jlo - jm);
      z = std::min(b.second, jhi + jm);
      pa = std::max(0.0, plo - pm);
      pz = std::min(1.0, phi_hi + pm);
    }
    g.j2 = Eigen::VectorXd::LinSpaced(s.j2_nodes, a, z);
    g.phi = Eigen::VectorXd::LinSpaced(s.phi_nodes, pa, pz);
    g.weight = Eigen::MatrixXd::Ones(s.j2_nodes, s.phi_nodes);
    grid.regimes.push_back(std::move(g));
  }
  return grid;
}

struct InvariantLossResult {
  double value = 0.0;
  Eigen::MatrixXd nodes;   ///< (J2, phi)
  Eigen::VectorXd error;   ///< candidate - truth per node
  double rmse_small = 0.0;
  double rmse_large = 0.0;
  double rmse = 0.0;
};

/// sum_k w_k (s(x_k) - s_true(x_k))^2 over the grid nodes.
inline InvariantLossResult invariant_loss(const DamageRateModel& candidate, const DamageRateModel& truth,
                                          const InvariantDomainGrid& grid) {
  InvariantLossResult r;
  r.nodes = grid.nodes();
  const Eigen::VectorXd w = grid.weights();
  r.error = candidate.evaluate(r.nodes).value - truth.evaluate(r.nodes).value;
  r.value = (w.array() * r.error.array().square()).sum();
  const auto tags = grid.node_regimes();
  double ss = 0.0, sl = 0.0;
  int ns = 0, nl = 0;
  for (Eigen::Index k = 0; k < r.error.size(); ++k) {
    const double e2 = r.error(k) * r.error(k);
    if (tags[static_cast<std::size_t>(k)] == StrainRegime::small) {
      ss += e2;
      ++ns;
    } else {
      sl += e2;
      ++nl;
    }
  }
  r.rmse_small = ns > 0 ? std::sqrt(ss / ns) : 0.0;
  r.rmse_large = nl > 0 ? std::sqrt(sl / nl) : 0.0;
  r.rmse = r.error.size() > 0 ? std::sqrt((ss + sl) / static_cast<double>(r.error.size())) : 0.0;
  return r;
}

}  // namespace icecr
