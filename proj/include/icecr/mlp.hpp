/**
 * @file mlp.hpp
 * @brief Small fully-connected networks used as damage-rate coefficient functions.
 *
 * A network maps the scaled invariants (J2, phi) to a single coefficient. Hidden
 * layers apply the activation; the last layer is affine. Gradients with respect
 * to the flattened parameter vector are computed by reverse-mode accumulation,
 * and directional derivatives by forward-mode accumulation.
 *
 * Flattened order: for each layer, the weight matrix row-major (out x in),
 * followed by its bias vector.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icecr/errors.hpp"

namespace icecr {

enum class Activation { tanh, relu, softplus };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  throw ContractViolation("unknown activation '" + s + "'");
}

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::softplus: return std::log1p(std::exp(-std::abs(x))) + (x > 0.0 ? x : 0.0);
  }
  return 0.0;
}

/// Derivative as a function of the pre-activation x; ReLU'(0) = 0.
inline double activate_slope(Activation a, double x) {
  switch (a) {
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::softplus:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return 0.0;
}

}  // namespace detail

class MlpParams {
public:
  MlpParams() = default;

  MlpParams(std::vector<int> layer_sizes, Activation activation)
      : sizes_(std::move(layer_sizes)), activation_(activation) {
    require(sizes_.size() >= 2, "a network needs at least an input and an output layer");
    require(sizes_.front() == 2 && sizes_.back() == 1, "layer sizes must start with 2 and end with 1");
    for (int s : sizes_) require(s > 0, "layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weights_.emplace_back(Eigen::MatrixXd::Zero(sizes_[l + 1], sizes_[l]));
      biases_.emplace_back(Eigen::VectorXd::Zero(sizes_[l + 1]));
    }
  }

  /// Hidden widths only, e.g. {4, 4} for 2 -> 4 -> 4 -> 1.
  static MlpParams from_hidden(const std::vector<int>& hidden, Activation activation) {
    std::vector<int> sizes{2};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(1);
    return {sizes, activation};
  }

  [[nodiscard]] const std::vector<int>& layer_sizes() const { return sizes_; }
  [[nodiscard]] std::vector<int> hidden_sizes() const { return {sizes_.begin() + 1, sizes_.end() - 1}; }
  [[nodiscard]] Activation activation() const { return activation_; }
  [[nodiscard]] std::size_t layer_count() const { return weights_.size(); }
  [[nodiscard]] int input_size() const { return sizes_.front(); }

  Eigen::MatrixXd& weight(std::size_t l) { return weights_[l]; }
  [[nodiscard]] const Eigen::MatrixXd& weight(std::size_t l) const { return weights_[l]; }
  Eigen::VectorXd& bias(std::size_t l) { return biases_[l]; }
  [[nodiscard]] const Eigen::VectorXd& bias(std::size_t l) const { return biases_[l]; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
  }

  [[nodiscard]] Eigen::VectorXd flatten() const {
    Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const auto& w = weights_[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) flat(k++) = w(i, j);
      for (Eigen::Index i = 0; i < biases_[l].size(); ++i) flat(k++) = biases_[l](i);
    }
    return flat;
  }

  void unflatten(const Eigen::VectorXd& flat) {
    require(static_cast<std::size_t>(flat.size()) == parameter_count(), "flat parameter vector has wrong length");
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      auto& w = weights_[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = flat(k++);
      for (Eigen::Index i = 0; i < biases_[l].size(); ++i) biases_[l](i) = flat(k++);
    }
  }

  [[nodiscard]] MlpParams with_flat(const Eigen::VectorXd& flat) const {
    MlpParams copy = *this;
    copy.unflatten(flat);
    return copy;
  }

  [[nodiscard]] MlpParams scaled(double alpha) const { return with_flat(alpha * flatten()); }

private:
  std::vector<int> sizes_;
  Activation activation_ = Activation::tanh;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
};

/// Standard-normal weights, zero biases, drawn in flattened order from a seeded mt19937_64.
inline MlpParams mlp_init(std::uint64_t seed, const std::vector<int>& layer_sizes, Activation activation) {
  MlpParams p(layer_sizes, activation);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    auto& w = p.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = normal(rng);
  }
  return p;
}

struct InputScaler {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static InputScaler identity(int n) { return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Ones(n)}; }

  [[nodiscard]] Eigen::Index size() const { return mean.size(); }

  [[nodiscard]] Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const {
    require(rows.cols() == mean.size(), "scaler arity mismatch");
    Eigen::MatrixXd out(rows.rows(), rows.cols());
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
      for (Eigen::Index c = 0; c < rows.cols(); ++c) out(r, c) = (rows(r, c) - mean(c)) / std(c);
    return out;
  }
};

/// Population mean and standard deviation per column.
inline InputScaler fit_scaler(const Eigen::MatrixXd& batch) {
  require(batch.rows() > 0, "cannot fit a scaler to an empty batch");
  const auto n = static_cast<double>(batch.rows());
  InputScaler s{batch.colwise().mean().transpose(), Eigen::VectorXd(batch.cols())};
  for (Eigen::Index c = 0; c < batch.cols(); ++c) {
    const double var = (batch.col(c).array() - s.mean(c)).square().sum() / n;
    if (batch.col(c).maxCoeff() == batch.col(c).minCoeff() || !(var > 0.0)) throw DegenerateData("invariant column " + std::to_string(c) + " has zero variance");
    s.std(c) = std::sqrt(var);
  }
  return s;
}

/// Per-row evaluation with the intermediate values needed for differentiation.
class MlpEvaluator {
public:
  MlpEvaluator(const MlpParams& params, const InputScaler& scaler) : p_(params), s_(scaler) {
    require(scaler.size() == params.input_size(), "scaler arity does not match network input size");
    for (std::size_t l = 0; l < p_.layer_count(); ++l) {
      pre_.emplace_back(p_.weight(l).rows());
      post_.emplace_back(p_.weight(l).rows());
    }
    input_.resize(p_.input_size());
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < p_.layer_count(); ++l) {
      offset_.push_back(k);
      k += p_.weight(l).size() + p_.bias(l).size();
    }
  }

  [[nodiscard]] const MlpParams& params() const { return p_; }

  double forward(std::span<const double> raw) {
    require(static_cast<Eigen::Index>(raw.size()) == input_.size(), "network input arity mismatch");
    for (Eigen::Index i = 0; i < input_.size(); ++i) input_(i) = (raw[static_cast<std::size_t>(i)] - s_.mean(i)) / s_.std(i);
    const std::size_t last = p_.layer_count() - 1;
    for (std::size_t l = 0; l <= last; ++l) {
      const Eigen::VectorXd& in = l == 0 ? input_ : post_[l - 1];
      pre_[l].noalias() = p_.weight(l) * in;
      pre_[l] += p_.bias(l);
      if (l == last) {
        post_[l] = pre_[l];
      } else {
        for (Eigen::Index i = 0; i < pre_[l].size(); ++i) post_[l](i) = detail::activate(p_.activation(), pre_[l](i));
      }
    }
    return post_[last](0);
  }

  /// Reverse sweep after forward(): adds cotangent * d(out)/d(theta) into grad, and
  /// optionally writes d(out)/d(raw input) into input_grad.
  void backward(double cotangent, Eigen::Ref<Eigen::VectorXd> grad, double* input_grad = nullptr) {
    const std::size_t last = p_.layer_count() - 1;
    Eigen::VectorXd delta = Eigen::VectorXd::Constant(1, cotangent);  // d/d(pre) of last layer
    for (std::size_t li = 0; li <= last; ++li) {
      const std::size_t l = last - li;
      const Eigen::VectorXd& in = l == 0 ? input_ : post_[l - 1];
      const auto& w = p_.weight(l);
      Eigen::Index o = offset_[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) grad(o++) += delta(i) * in(j);
      for (Eigen::Index i = 0; i < w.rows(); ++i) grad(o++) += delta(i);
      Eigen::VectorXd back = w.transpose() * delta;
      if (l > 0) {
        for (Eigen::Index i = 0; i < back.size(); ++i)
          back(i) *= detail::activate_slope(p_.activation(), pre_[l - 1](i));
      } else if (input_grad != nullptr) {
        for (Eigen::Index i = 0; i < back.size(); ++i) input_grad[i] = back(i) / s_.std(i);
      }
      delta = std::move(back);
    }
  }

  /// Gradient of the output with respect to the raw inputs (after forward()).
  void input_gradient(double* out) {
    Eigen::VectorXd scratch = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p_.parameter_count()));
    backward(1.0, scratch, out);
  }

  /// Forward-mode directional derivative d(out)/d(theta) . direction (after forward()).
  double tangent(const Eigen::VectorXd& direction) {
    const std::size_t last = p_.layer_count() - 1;
    Eigen::VectorXd dact = Eigen::VectorXd::Zero(input_.size());
    Eigen::Index k = 0;
    for (std::size_t l = 0; l <= last; ++l) {
      const Eigen::VectorXd& in = l == 0 ? input_ : post_[l - 1];
      const auto& w = p_.weight(l);
      Eigen::VectorXd dpre = w * dact;
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) dpre(i) += direction(k++) * in(j);
      for (Eigen::Index i = 0; i < w.rows(); ++i) dpre(i) += direction(k++);
      if (l == last) return dpre(0);
      dact.resize(dpre.size());
      for (Eigen::Index i = 0; i < dpre.size(); ++i)
        dact(i) = detail::activate_slope(p_.activation(), pre_[l](i)) * dpre(i);
    }
    return 0.0;
  }

private:
  const MlpParams& p_;
  const InputScaler& s_;
  Eigen::VectorXd input_;
  std::vector<Eigen::VectorXd> pre_;
  std::vector<Eigen::VectorXd> post_;
  std::vector<Eigen::Index> offset_;
};

inline Eigen::VectorXd mlp_forward(const MlpParams& params, const InputScaler& scaler, const Eigen::MatrixXd& batch) {
  require(batch.cols() == params.input_size(), "invariant arity does not match network input size");
  MlpEvaluator ev(params, scaler);
  Eigen::VectorXd out(batch.rows());
  std::vector<double> row(static_cast<std::size_t>(batch.cols()));
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    for (Eigen::Index c = 0; c < batch.cols(); ++c) row[static_cast<std::size_t>(c)] = batch(r, c);
    out(r) = ev.forward(row);
  }
  return out;
}

/// Gradient of sum_r cotangent_r * out_r with respect to the flattened parameters.
inline Eigen::VectorXd mlp_gradients(const MlpParams& params, const InputScaler& scaler, const Eigen::MatrixXd& batch,
                                     const Eigen::VectorXd& cotangents) {
  require(cotangents.size() == batch.rows(), "cotangent batch does not match the forward batch");
  require(batch.cols() == params.input_size(), "invariant arity does not match network input size");
  MlpEvaluator ev(params, scaler);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(params.parameter_count()));
  std::vector<double> row(static_cast<std::size_t>(batch.cols()));
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    if (cotangents(r) == 0.0) continue;
    for (Eigen::Index c = 0; c < batch.cols(); ++c) row[static_cast<std::size_t>(c)] = batch(r, c);
    ev.forward(row);
    ev.backward(cotangents(r), grad);
  }
  return grad;
}

/// Largest alpha in {1, 1/2, ..., 2^-max_halvings} with probe(alpha * candidate); zero parameters otherwise.
inline MlpParams feasible_init(const MlpParams& candidate, const std::function<bool(const MlpParams&)>& probe,
                               int max_halvings = 20) {
  const Eigen::VectorXd flat = candidate.flatten();
  double alpha = 1.0;
  for (int k = 0; k <= max_halvings; ++k, alpha *= 0.5) {
    MlpParams trial = candidate.with_flat(alpha * flat);
    if (probe(trial)) return trial;
  }
  return candidate.with_flat(Eigen::VectorXd::Zero(flat.size()));
}

/// True when outputs over the probe grid are constant to 1e-8 (1 + mean |output|).
inline bool detect_constant_collapse(const MlpParams& params, const InputScaler& scaler,
                                     const Eigen::MatrixXd& probe_grid) {
  const Eigen::VectorXd out = mlp_forward(params, scaler, probe_grid);
  if (out.size() == 0) return true;
  const double mean = out.mean();
  const double sd = std::sqrt((out.array() - mean).square().mean());
  return sd < 1e-8 * (1.0 + out.array().abs().mean());
}

}  // namespace icecr
