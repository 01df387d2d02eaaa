/**
 * @file tensor.hpp
 * @brief Small tensors with a runtime signature and symmetric-packed storage.
 *
 * Packed layouts:
 *   - scalar: [s]
 *   - vector: [x, y(, z)]
 *   - symmetric 2nd order, 2D: [xx, yy, xy]
 *   - symmetric 2nd order, 3D: [xx, yy, zz, yz, xz, xy]
 *   - general 2nd order: row-major
 */
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "icecr/errors.hpp"

namespace icecr {

struct TensorSignature {
  int order = 0;
  int dim = 2;
  bool symmetric = false;

  static constexpr TensorSignature scalar() { return {0, 0, false}; }
  static constexpr TensorSignature vector(int dim) { return {1, dim, false}; }
  static constexpr TensorSignature make_symmetric(int order, int dim) {
    return {order, dim, true};
  }

  [[nodiscard]] constexpr int component_count() const {
    switch (order) {
      case 0: return 1;
      case 1: return dim;
      default: return symmetric ? dim * (dim + 1) / 2 : dim * dim;
    }
  }

  [[nodiscard]] bool valid() const {
    if (order == 0) return true;
    if (dim != 2 && dim != 3) return false;
    if (order == 1) return !symmetric;
    return order == 2;
  }

  friend constexpr bool operator==(const TensorSignature& a, const TensorSignature& b) {
    if (a.order != b.order) return false;
    if (a.order == 0) return true;  // dim irrelevant for scalars
    return a.dim == b.dim && a.symmetric == b.symmetric;
  }

  [[nodiscard]] std::string describe() const {
    if (order == 0) return "scalar";
    if (order == 1) return "vector" + std::to_string(dim) + "d";
    return std::string(symmetric ? "sym" : "gen") + "2-" + std::to_string(dim) + "d";
  }
};

/// Value with a signature; at most 9 packed components.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(TensorSignature sig) : sig_(sig) {
    require(sig.valid(), "invalid tensor signature");
  }

  Tensor(TensorSignature sig, std::initializer_list<double> packed) : Tensor(sig) {
    require(static_cast<int>(packed.size()) == sig.component_count(),
            "packed component count does not match signature " + sig.describe());
    std::size_t i = 0;
    for (double v : packed) c_[i++] = v;
  }

  static Tensor scalar(double s) { return {TensorSignature::scalar(), {s}}; }

  static Tensor from_matrix(const Eigen::MatrixXd& m, bool symmetric = true) {
    const auto dim = static_cast<int>(m.rows());
    require(m.rows() == m.cols(), "matrix must be square");
    Tensor t(symmetric ? TensorSignature::make_symmetric(2, dim) : TensorSignature{2, dim, false});
    if (!symmetric) {
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) t.c_[static_cast<std::size_t>(i * dim + j)] = m(i, j);
      return t;
    }
    if (dim == 2) {
      t.c_ = {m(0, 0), m(1, 1), 0.5 * (m(0, 1) + m(1, 0))};
    } else {
      t.c_ = {m(0, 0), m(1, 1), m(2, 2), 0.5 * (m(1, 2) + m(2, 1)), 0.5 * (m(0, 2) + m(2, 0)),
              0.5 * (m(0, 1) + m(1, 0))};
    }
    return t;
  }

  static Tensor from_vector(const Eigen::VectorXd& v) {
    Tensor t(TensorSignature::vector(static_cast<int>(v.size())));
    for (int i = 0; i < v.size(); ++i) t.c_[static_cast<std::size_t>(i)] = v(i);
    return t;
  }

  [[nodiscard]] const TensorSignature& signature() const { return sig_; }
  [[nodiscard]] std::span<const double> packed() const {
    return {c_.data(), static_cast<std::size_t>(sig_.component_count())};
  }
  [[nodiscard]] std::span<double> packed() {
    return {c_.data(), static_cast<std::size_t>(sig_.component_count())};
  }
  double& operator[](std::size_t i) { return c_[i]; }
  double operator[](std::size_t i) const { return c_[i]; }

  [[nodiscard]] double as_scalar() const {
    require(sig_.order == 0, "tensor is not a scalar");
    return c_[0];
  }

  [[nodiscard]] Eigen::VectorXd as_vector() const {
    require(sig_.order == 1, "tensor is not a vector");
    Eigen::VectorXd v(sig_.dim);
    for (int i = 0; i < sig_.dim; ++i) v(i) = c_[static_cast<std::size_t>(i)];
    return v;
  }

  /// Unpacked square matrix of a 2nd-order tensor.
  [[nodiscard]] Eigen::MatrixXd as_matrix() const {
    require(sig_.order == 2, "tensor is not 2nd order");
    const int d = sig_.dim;
    Eigen::MatrixXd m(d, d);
    if (!sig_.symmetric) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = c_[static_cast<std::size_t>(i * d + j)];
    } else if (d == 2) {
      m << c_[0], c_[2], c_[2], c_[1];
    } else {
      m << c_[0], c_[5], c_[4], c_[5], c_[1], c_[3], c_[4], c_[3], c_[2];
    }
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    require(sig_ == o.sig_, "signature mismatch in tensor sum");
    for (int i = 0; i < sig_.component_count(); ++i) c_[static_cast<std::size_t>(i)] += o.c_[static_cast<std::size_t>(i)];
    return *this;
  }

  friend Tensor operator*(double a, Tensor t) {
    for (int i = 0; i < t.sig_.component_count(); ++i) t.c_[static_cast<std::size_t>(i)] *= a;
    return t;
  }

  /// Frobenius norm of the unpacked tensor.
  [[nodiscard]] double norm() const {
    if (sig_.order == 2) return as_matrix().norm();
    double s = 0.0;
    for (double v : packed()) s += v * v;
    return std::sqrt(s);
  }

private:
  TensorSignature sig_{};
  std::array<double, 9> c_{};
};

/// Apply an orthogonal change of frame: s -> s, v -> Qv, A -> Q A Q^T.
inline Tensor rotate(const Tensor& t, const Eigen::MatrixXd& q) {
  const auto& sig = t.signature();
  if (sig.order == 0) return t;
  require(q.rows() == sig.dim && q.cols() == sig.dim, "rotation dimension mismatch");
  if (sig.order == 1) return Tensor::from_vector(q * t.as_vector());
  return Tensor::from_matrix(q * t.as_matrix() * q.transpose(), sig.symmetric);
}

inline Eigen::Matrix2d rotation2d(double angle) {
  Eigen::Matrix2d q;
  q << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return q;
}

}  // namespace icecr
