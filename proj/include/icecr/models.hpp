/**
 * @file models.hpp
 * @brief Hand-derived ice constitutive relations written in Wineman-Pipkin form.
 *
 * These are the ground-truth and reference models: Glen flow, damage-softened
 * Glen flow, the Albrecht-Levermann damage rate, ESTAR (3D), and the pointwise
 * Borstad-style "Damage2" rate.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "icecr/errors.hpp"
#include "icecr/invariants.hpp"
#include "icecr/tensor.hpp"

namespace icecr {

struct GlenParams {
  double mu = 1.0;
  double n = 3.0;
  double eps_reg = 1e-12;  ///< added to J2^2 before the fractional power

  void validate() const {
    require(mu > 0.0, "Glen mu must be positive");
    require(n >= 1.0, "Glen exponent n must be >= 1");
    require(eps_reg >= 0.0, "Glen regularization must be nonnegative");
  }
};

struct DamageParams {
  double gamma_f = 0.5;  ///< fracture rate factor
  double gamma_h = 0.1;  ///< healing rate factor
  double eps_f = 2.0;    ///< fracture threshold strain rate
  double eps_h = 1.0;    ///< healing threshold strain rate
  double zeta = 0.001;   ///< softening guard: the stress sees (1 - zeta) * phi
  double n = 3.0;        ///< flow exponent in the damage-dependent fracture threshold

  void validate() const {
    require(gamma_f >= 0.0 && gamma_h >= 0.0, "damage rate factors must be nonnegative");
    require(eps_f > eps_h && eps_h > 0.0, "damage thresholds must satisfy eps_f > eps_h > 0");
    require(zeta > 0.0 && zeta < 1.0, "zeta must lie in (0, 1)");
    require(n >= 1.0, "damage exponent n must be >= 1");
  }
};

struct EstarParams {
  double E_C = 1.0;  ///< compression enhancement
  double E_S = 8.0;  ///< shear enhancement
  double mu = 1.0;
  double n = 3.0;
  double eps_reg = 1e-12;

  void validate() const {
    require(E_C > 0.0 && E_S > 0.0, "ESTAR enhancement factors must be positive");
    require(mu > 0.0 && n >= 1.0, "ESTAR mu > 0 and n >= 1 required");
  }
};

struct Damage2Params {
  double tau_0 = 1.0;  ///< threshold stress
  double eps_0 = 1.0;  ///< threshold strain rate
  double kappa = 2.0;  ///< decay shape, > 1
  double mu = 1.0;
  double n = 3.0;

  void validate() const {
    require(tau_0 > 0.0 && eps_0 > 0.0, "Damage2 thresholds must be positive");
    require(kappa > 1.0, "Damage2 kappa must exceed 1");
    require(mu > 0.0 && n >= 1.0, "Damage2 mu > 0 and n >= 1 required");
  }
};

/// Glen viscosity factor mu (J2^2 + eps)^((1/n - 1)/2).
inline double glen_viscosity(double j2, const GlenParams& p) {
  return p.mu * std::pow(j2 * j2 + p.eps_reg, 0.5 * (1.0 / p.n - 1.0));
}

/// Glen flow in Wineman-Pipkin form: c = [0, mu J2^(1/n-1)(, 0)].
inline ConstitutiveRelation glen_cr(int dim, const GlenParams& p) {
  p.validate();
  return {InvariantBasis::symmetric_tensor(dim), [p, dim](std::span<const double> j, std::span<const double>) {
            std::vector<double> c(static_cast<std::size_t>(dim), 0.0);
            c[1] = glen_viscosity(j[1], p);
            return c;
          },
          {}};
}

inline Tensor glen_stress(const Tensor& strain_rate, const GlenParams& p) {
  const auto& sig = strain_rate.signature();
  require(sig.order == 2 && sig.symmetric, "strain rate must be a symmetric 2nd-order tensor");
  return wineman_pipkin_eval(glen_cr(sig.dim, p), {strain_rate});
}

/// Damage-softened Glen flow with inputs (strain rate, phi); phi is capped by (1 - zeta).
inline ConstitutiveRelation damaged_glen_cr(int dim, const GlenParams& gp, const DamageParams& dp) {
  gp.validate();
  return {InvariantBasis::symmetric_tensor(dim, 1),
          [gp, dp, dim](std::span<const double> j, std::span<const double>) {
            std::vector<double> c(static_cast<std::size_t>(dim), 0.0);
            const double phi = j[static_cast<std::size_t>(dim)];
            c[1] = (1.0 - (1.0 - dp.zeta) * phi) * glen_viscosity(j[1], gp);
            return c;
          },
          {}};
}

inline Tensor damaged_stress(const Tensor& strain_rate, double phi, const GlenParams& gp, const DamageParams& dp) {
  require(phi >= 0.0 && phi <= 1.0, "damage must lie in [0, 1]");
  const auto& sig = strain_rate.signature();
  require(sig.order == 2 && sig.symmetric, "strain rate must be a symmetric 2nd-order tensor");
  return wineman_pipkin_eval(damaged_glen_cr(sig.dim, gp, dp), {strain_rate, Tensor::scalar(phi)});
}

/// Albrecht-Levermann damage rate s = s_f + s_h with the strain-rate norm J2.
inline double albrecht_levermann_rate(double j2, double phi, const DamageParams& p) {
  double s_f = 0.0;
  if (j2 > std::pow(1.0 - phi, -p.n) * p.eps_f) s_f = p.gamma_f * j2 * (1.0 - phi);
  double s_h = 0.0;
  if (j2 <= p.eps_h && phi > 0.0) s_h = p.gamma_h * (j2 - p.eps_h);
  return s_f + s_h;
}

/// Partial derivatives of the Albrecht-Levermann rate away from its jumps.
struct RateDerivatives {
  double value = 0.0;
  double d_j2 = 0.0;
  double d_phi = 0.0;
};

inline RateDerivatives albrecht_levermann_rate_derivatives(double j2, double phi, const DamageParams& p) {
  RateDerivatives r;
  if (j2 > std::pow(1.0 - phi, -p.n) * p.eps_f) {
    r.value += p.gamma_f * j2 * (1.0 - phi);
    r.d_j2 += p.gamma_f * (1.0 - phi);
    r.d_phi -= p.gamma_f * j2;
  }
  if (j2 <= p.eps_h && phi > 0.0) {
    r.value += p.gamma_h * (j2 - p.eps_h);
    r.d_j2 += p.gamma_h;
  }
  return r;
}

/// Albrecht-Levermann rate with smoothed guards: 0.5 (1 + tanh(x / width)) on the strain-rate
/// guards, a C1 smoothstep over [0, width] on the phi > 0 guard.
/// The fracture guard is taken in the form J2 (1 - phi)^n - eps_f > 0. width -> 0 recovers the
/// exact rate for phi < 1.
inline RateDerivatives smoothed_albrecht_levermann_rate(double j2, double phi, const DamageParams& p, double width) {
  if (!(width > 0.0)) return albrecht_levermann_rate_derivatives(j2, phi, p);
  auto step = [width](double x, double& slope) {
    const double t = std::tanh(x / width);
    slope = 0.5 * (1.0 - t * t) / width;
    return 0.5 * (1.0 + t);
  };
  RateDerivatives r;
  const double one_m = std::max(1.0 - phi, 0.0);
  const double arg_f = j2 * std::pow(one_m, p.n) - p.eps_f;
  const double darg_f_dj2 = std::pow(one_m, p.n);
  const double darg_f_dphi = one_m > 0.0 ? -p.n * j2 * std::pow(one_m, p.n - 1.0) : 0.0;
  double hf_slope = 0.0;
  const double hf = step(arg_f, hf_slope);
  const double sf = p.gamma_f * j2 * (1.0 - phi);
  r.value += sf * hf;
  r.d_j2 += p.gamma_f * (1.0 - phi) * hf + sf * hf_slope * darg_f_dj2;
  r.d_phi += -p.gamma_f * j2 * hf + sf * hf_slope * darg_f_dphi;

  double hj_slope = 0.0, hp_slope = 0.0;
  const double hj = step(p.eps_h - j2, hj_slope);
  // one-sided on phi so that healing never acts on phi <= 0
  const double tp = std::clamp(phi / width, 0.0, 1.0);
  const double hp = tp * tp * (3.0 - 2.0 * tp);
  if (tp > 0.0 && tp < 1.0) hp_slope = 6.0 * tp * (1.0 - tp) / width;
  const double sh = p.gamma_h * (j2 - p.eps_h);
  r.value += sh * hj * hp;
  r.d_j2 += p.gamma_h * hj * hp - sh * hj_slope * hp;
  r.d_phi += sh * hj * hp_slope;
  return r;
}

/// Scalar-output CR over (strain rate, phi): J = [tr, J2, phi], G = [1].
inline ConstitutiveRelation albrecht_levermann_cr(int dim, const DamageParams& p) {
  return {InvariantBasis::scalar_of_tensor(dim, 1),
          [p, dim](std::span<const double> j, std::span<const double>) {
            return std::vector<double>{albrecht_levermann_rate(j[1], j[static_cast<std::size_t>(dim)], p)};
          },
          {}};
}

// ---------------------------------------------------------------- ESTAR

/// Shear fraction lambda_S of the ESTAR pipeline for 3D inputs.
inline double estar_shear_fraction(const Eigen::Matrix3d& strain_rate, const Eigen::Vector3d& vorticity,
                                   const Eigen::Vector3d& velocity) {
  const double u2 = velocity.squaredNorm();
  if (!(u2 > 0.0)) throw DegenerateGeometry("ESTAR: velocity must be nonzero");
  // (u . grad) u = L u with L = strain_rate + spin, spin * v = 0.5 * (omega x v)
  const Eigen::Vector3d advective = strain_rate * velocity + 0.5 * vorticity.cross(velocity);
  const Eigen::Vector3d omega1 = vorticity - 2.0 * velocity.cross(advective) / u2;
  const Eigen::Vector3d omega_d = omega1 - velocity.dot(omega1) * velocity / u2;
  const double wd = omega_d.norm();
  if (!(wd > 0.0)) throw DegenerateGeometry("ESTAR: deformational vorticity vanishes");
  const Eigen::Vector3d omega_hat = omega_d / wd;
  const Eigen::Vector3d cross = velocity.cross(omega_d);
  const double cn = cross.norm();
  if (!(cn > 0.0)) throw DegenerateGeometry("ESTAR: shear-plane normal is undefined");
  const Eigen::Vector3d normal = cross / cn;
  const Eigen::Vector3d traction = strain_rate * normal;
  const Eigen::Vector3d shear =
      traction - normal.dot(traction) * normal - omega_hat.dot(traction) * omega_hat;
  const double j2 = strain_rate.norm();
  if (!(j2 > 0.0)) return 0.0;
  return shear.norm() / j2;
}

inline Tensor estar_stress(const Tensor& strain_rate, const Tensor& vorticity, const Tensor& velocity,
                           const EstarParams& p) {
  p.validate();
  require(strain_rate.signature() == TensorSignature::make_symmetric(2, 3), "ESTAR strain rate must be sym2-3d");
  require(vorticity.signature() == TensorSignature::vector(3), "ESTAR vorticity must be a 3D vector");
  require(velocity.signature() == TensorSignature::vector(3), "ESTAR velocity must be a 3D vector");
  const Eigen::Matrix3d e = strain_rate.as_matrix();
  const double lambda = estar_shear_fraction(e, vorticity.as_vector(), velocity.as_vector());
  const double enhancement = p.E_C + (p.E_S - p.E_C) * lambda * lambda;
  const GlenParams gp{p.mu, p.n, p.eps_reg};
  return std::pow(enhancement, 1.0 / p.n) * glen_stress(strain_rate, gp);
}

// ---------------------------------------------------------------- Damage2

inline double damage2_envelope(double j2, const Damage2Params& p) {
  return p.tau_0 * std::exp(-(j2 - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)));
}

inline double damage2_undamaged_stress(double j2, double phi, const Damage2Params& p) {
  return (1.0 - phi) * p.mu * std::pow(j2, 1.0 / p.n);
}

/// Damage that places the effective stress on the envelope: 1 - (J2/eps0)^(-1/n) exp(...).
inline double damage2_target(double j2, const Damage2Params& p) {
  return 1.0 - std::pow(j2 / p.eps_0, -1.0 / p.n) * std::exp(-(j2 - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)));
}

/// d(target)/dJ2, the exact derivative of damage2_target.
inline double damage2_target_slope(double j2, const Damage2Params& p) {
  const double decay = std::pow(j2 / p.eps_0, -1.0 / p.n) * std::exp(-(j2 - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)));
  return decay * (1.0 / (p.n * j2) + 1.0 / (p.eps_0 * (p.kappa - 1.0)));
}

/// Material rate of damage; nonzero only while the envelope lies below the undamaged power law.
inline double damage2_rate(double j2, double j2_material_rate, double phi, const Damage2Params& p) {
  require(j2 > 0.0, "Damage2 rate requires J2 > 0");
  if (!(damage2_envelope(j2, p) < damage2_undamaged_stress(j2, phi, p))) return 0.0;
  return damage2_target_slope(j2, p) * j2_material_rate;
}

/// Tensor-level Damage2 rate: J2 = |e|, DJ2/Dt = (e : De/Dt) / J2.
inline double damage2_rate(const Tensor& strain_rate, const Tensor& strain_rate_material_derivative, double phi,
                           const Damage2Params& p) {
  require(strain_rate.signature() == strain_rate_material_derivative.signature(),
          "Damage2 tensors must share a signature");
  const Eigen::MatrixXd e = strain_rate.as_matrix();
  const Eigen::MatrixXd de = strain_rate_material_derivative.as_matrix();
  const double j2 = e.norm();
  return damage2_rate(j2, (e.cwiseProduct(de)).sum() / j2, phi, p);
}

}  // namespace icecr
