/**
 * @file adjoint.hpp
 * @brief Gradients of state functionals with respect to damage-rate parameters.
 *
 * At a converged state w of F(w; theta) = 0:
 *   J^T lambda = dL/dw,   dL/dtheta = -lambda^T dF/dtheta.
 * The rate enters F only through its values at quadrature points, so
 * lambda^T dF/dtheta = vjp_theta(s, S^T lambda) with S = dF/ds.
 */
#pragma once

#include <optional>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "icecr/damage_rate.hpp"
#include "icecr/fem.hpp"

namespace icecr {

inline constexpr double default_failed_solve_loss = 1e12;

/// A scalar functional of the discrete state.
class StateFunctional {
public:
  virtual ~StateFunctional() = default;
  [[nodiscard]] virtual double value(const Eigen::VectorXd& w) const = 0;
  [[nodiscard]] virtual Eigen::VectorXd state_gradient(const Eigen::VectorXd& w) const = 0;
};

struct LossGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;  ///< empty when the forward solve failed
  bool solve_failed = false;
  SolveOutcome outcome;
};

/// Factorization of the transposed Jacobian at a converged state.
class AdjointWorkspace {
public:
  AdjointWorkspace(const Discretization& disc, const ExperimentConfig& cfg, const DamageRateModel& rate,
                   const Eigen::VectorXd& w)
      : assembler_(disc, cfg, rate), w_(w) {
    Eigen::VectorXd f;
    assembler_.assemble(w, f, &jac_);
    lu_.compute(jac_);
    require(lu_.info() == Eigen::Success, "adjoint: Jacobian at the converged state is singular");
    sensitivity_ = assembler_.rate_sensitivity(w);
    rows_ = rate_inputs(disc, w);
  }

  /// lambda with J^T lambda = rhs.
  [[nodiscard]] Eigen::VectorXd adjoint(const Eigen::VectorXd& rhs) const { return lu_.transpose().solve(rhs); }
  /// dw with J dw = rhs.
  [[nodiscard]] Eigen::VectorXd tangent(const Eigen::VectorXd& rhs) const { return lu_.solve(rhs); }

  [[nodiscard]] const Eigen::SparseMatrix<double>& rate_sensitivity() const { return sensitivity_; }
  [[nodiscard]] const Eigen::MatrixXd& rate_rows() const { return rows_; }

private:
  Assembler assembler_;
  Eigen::VectorXd w_;
  Eigen::SparseMatrix<double> jac_;
  mutable Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu_;
  Eigen::SparseMatrix<double> sensitivity_;
  Eigen::MatrixXd rows_;
};

/// Loss and its gradient with respect to the parameters of `rate`.
inline LossGradient loss_gradient(const Discretization& disc, const ExperimentConfig& cfg, const DamageRateModel& rate,
                                  const StateFunctional& loss,
                                  const std::optional<ExperimentState>& initial_guess = std::nullopt,
                                  double failed_solve_loss = default_failed_solve_loss) {
  LossGradient out;
  out.outcome = solve_forward(disc, cfg, rate, initial_guess);
  if (!out.outcome.converged) {
    out.loss = failed_solve_loss;
    out.solve_failed = true;
    return out;
  }
  const Eigen::VectorXd& w = out.outcome.state->w;
  out.loss = loss.value(w);
  const AdjointWorkspace ws(disc, cfg, rate, w);
  const Eigen::VectorXd lambda = ws.adjoint(loss.state_gradient(w));
  const Eigen::VectorXd cot = ws.rate_sensitivity().transpose() * lambda;
  out.gradient = -rate.parameter_vjp(ws.rate_rows(), cot);
  return out;
}

struct DirectionalDerivative {
  double value = 0.0;
  bool solve_failed = false;
};

/// dL/dtheta . direction by a forward tangent solve; test utility for the adjoint.
inline DirectionalDerivative forward_sensitivity_probe(const Discretization& disc, const ExperimentConfig& cfg,
                                                       const DamageRateModel& rate, const StateFunctional& loss,
                                                       const Eigen::VectorXd& direction,
                                                       const std::optional<ExperimentState>& initial_guess = std::nullopt) {
  require(direction.size() == rate.parameter_count(), "direction size must match the parameter count");
  const auto outcome = solve_forward(disc, cfg, rate, initial_guess);
  if (!outcome.converged) return {0.0, true};
  const Eigen::VectorXd& w = outcome.state->w;
  const AdjointWorkspace ws(disc, cfg, rate, w);
  const Eigen::VectorXd ds = rate.parameter_jvp(ws.rate_rows(), direction);
  const Eigen::VectorXd dw = ws.tangent(-(ws.rate_sensitivity() * ds));
  return {loss.state_gradient(w).dot(dw), false};
}

}  // namespace icecr
