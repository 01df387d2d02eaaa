/**
 * @file damage_rate.hpp
 * @brief Damage-rate closures s(J2, phi) as seen by the finite-element assembly.
 *
 * A closure is evaluated on a batch of rows (J2, phi), one per quadrature point,
 * and reports the rate together with its partial derivatives. Parametric
 * closures also expose parameter-space products for the adjoint and tangent
 * computations.
 */
#pragma once

#include <memory>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "icecr/mlp.hpp"
#include "icecr/models.hpp"

namespace icecr {

struct RateBatch {
  Eigen::VectorXd value;
  Eigen::VectorXd d_j2;
  Eigen::VectorXd d_phi;
};

class DamageRateModel {
public:
  virtual ~DamageRateModel() = default;

  /// rows: N x 2 matrix of (J2, phi).
  [[nodiscard]] virtual RateBatch evaluate(const Eigen::MatrixXd& rows) const = 0;
  [[nodiscard]] virtual std::string name() const = 0;

  [[nodiscard]] virtual Eigen::Index parameter_count() const { return 0; }

  /// sum_r cotangent_r * d s_r / d theta
  [[nodiscard]] virtual Eigen::VectorXd parameter_vjp(const Eigen::MatrixXd& /*rows*/,
                                                      const Eigen::VectorXd& /*cotangent*/) const {
    return Eigen::VectorXd::Zero(parameter_count());
  }

  /// per-row d s_r / d theta . direction
  [[nodiscard]] virtual Eigen::VectorXd parameter_jvp(const Eigen::MatrixXd& rows,
                                                      const Eigen::VectorXd& /*direction*/) const {
    return Eigen::VectorXd::Zero(rows.rows());
  }

  /// Convenience scalar evaluation.
  [[nodiscard]] double rate(double j2, double phi) const {
    Eigen::MatrixXd row(1, 2);
    row << j2, phi;
    return evaluate(row).value(0);
  }
};

class AlbrechtLevermannRate final : public DamageRateModel {
public:
  /// width > 0 selects the smoothed guards.
  explicit AlbrechtLevermannRate(DamageParams p, double width = 0.0) : p_(p), width_(width) {
    p_.validate();
    require(width_ >= 0.0, "transition width must be nonnegative");
  }

  [[nodiscard]] RateBatch evaluate(const Eigen::MatrixXd& rows) const override {
    RateBatch b{Eigen::VectorXd(rows.rows()), Eigen::VectorXd(rows.rows()), Eigen::VectorXd(rows.rows())};
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const auto d = smoothed_albrecht_levermann_rate(rows(r, 0), rows(r, 1), p_, width_);
      b.value(r) = d.value;
      b.d_j2(r) = d.d_j2;
      b.d_phi(r) = d.d_phi;
    }
    return b;
  }
  [[nodiscard]] std::string name() const override { return "albrecht-levermann"; }
  [[nodiscard]] const DamageParams& params() const { return p_; }
  [[nodiscard]] double width() const { return width_; }

private:
  DamageParams p_;
  double width_;
};

/// s = c everywhere; its single parameter is c.
class ConstantRate final : public DamageRateModel {
public:
  explicit ConstantRate(double c) : c_(c) {}

  [[nodiscard]] RateBatch evaluate(const Eigen::MatrixXd& rows) const override {
    return {Eigen::VectorXd::Constant(rows.rows(), c_), Eigen::VectorXd::Zero(rows.rows()),
            Eigen::VectorXd::Zero(rows.rows())};
  }
  [[nodiscard]] std::string name() const override { return "constant"; }
  [[nodiscard]] Eigen::Index parameter_count() const override { return 1; }
  [[nodiscard]] Eigen::VectorXd parameter_vjp(const Eigen::MatrixXd&, const Eigen::VectorXd& cot) const override {
    return Eigen::VectorXd::Constant(1, cot.sum());
  }
  [[nodiscard]] Eigen::VectorXd parameter_jvp(const Eigen::MatrixXd& rows, const Eigen::VectorXd& dir) const override {
    return Eigen::VectorXd::Constant(rows.rows(), dir(0));
  }

private:
  double c_;
};

/// Network closure: s = mlp(scaled (J2, phi)).
class MlpRate final : public DamageRateModel {
public:
  MlpRate(MlpParams params, InputScaler scaler) : params_(std::move(params)), scaler_(std::move(scaler)) {
    require(scaler_.size() == 2, "damage-rate networks take (J2, phi)");
  }

  [[nodiscard]] RateBatch evaluate(const Eigen::MatrixXd& rows) const override {
    require(rows.cols() == 2, "damage-rate rows must be (J2, phi)");
    RateBatch b{Eigen::VectorXd(rows.rows()), Eigen::VectorXd(rows.rows()), Eigen::VectorXd(rows.rows())};
    MlpEvaluator ev(params_, scaler_);
    double in[2];
    double grad[2];
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      in[0] = rows(r, 0);
      in[1] = rows(r, 1);
      b.value(r) = ev.forward(in);
      ev.input_gradient(grad);
      b.d_j2(r) = grad[0];
      b.d_phi(r) = grad[1];
    }
    return b;
  }

  [[nodiscard]] std::string name() const override { return "mlp-" + to_string(params_.activation()); }
  [[nodiscard]] Eigen::Index parameter_count() const override {
    return static_cast<Eigen::Index>(params_.parameter_count());
  }
  [[nodiscard]] Eigen::VectorXd parameter_vjp(const Eigen::MatrixXd& rows, const Eigen::VectorXd& cot) const override {
    return mlp_gradients(params_, scaler_, rows, cot);
  }
  [[nodiscard]] Eigen::VectorXd parameter_jvp(const Eigen::MatrixXd& rows, const Eigen::VectorXd& dir) const override {
    MlpEvaluator ev(params_, scaler_);
    Eigen::VectorXd out(rows.rows());
    double in[2];
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      in[0] = rows(r, 0);
      in[1] = rows(r, 1);
      ev.forward(in);
      out(r) = ev.tangent(dir);
    }
    return out;
  }

  [[nodiscard]] const MlpParams& params() const { return params_; }
  [[nodiscard]] const InputScaler& scaler() const { return scaler_; }

private:
  MlpParams params_;
  InputScaler scaler_;
};

/// Network coefficient over (J2, phi) in Wineman-Pipkin form. Inputs are (strain rate, phi).
/// Scalar output: c = [net]. Tensor output: the network is the coefficient of the strain rate.
inline ConstitutiveRelation neural_cr(const MlpParams& params, const InputScaler& scaler, int dim,
                                      bool tensor_output) {
  require(scaler.size() == 2, "neural CR networks take (J2, phi)");
  auto basis = tensor_output ? InvariantBasis::symmetric_tensor(dim, 1) : InvariantBasis::scalar_of_tensor(dim, 1);
  auto net = std::make_shared<const MlpParams>(params);
  auto sc = std::make_shared<const InputScaler>(scaler);
  return {std::move(basis),
          [net, sc, dim, tensor_output](std::span<const double> j, std::span<const double>) {
            MlpEvaluator ev(*net, *sc);
            const double in[2] = {j[1], j[static_cast<std::size_t>(dim)]};
            const double out = ev.forward(in);
            if (!tensor_output) return std::vector<double>{out};
            std::vector<double> c(static_cast<std::size_t>(dim), 0.0);
            c[1] = out;
            return c;
          },
          {}};
}

/// lambda * inner, used for continuation in the damage source strength.
class ScaledRate final : public DamageRateModel {
public:
  ScaledRate(const DamageRateModel& inner, double lambda) : inner_(inner), lambda_(lambda) {}

  [[nodiscard]] RateBatch evaluate(const Eigen::MatrixXd& rows) const override {
    RateBatch b = inner_.evaluate(rows);
    b.value *= lambda_;
    b.d_j2 *= lambda_;
    b.d_phi *= lambda_;
    return b;
  }
  [[nodiscard]] std::string name() const override { return "scaled-" + inner_.name(); }

private:
  const DamageRateModel& inner_;
  double lambda_;
};

}  // namespace icecr
