/**
 * @file invariants.hpp
 * @brief Scalar/form invariants and Wineman-Pipkin evaluation of isotropic tensor functions.
 *
 * Supported input tuples: at most one symmetric 2nd-order tensor A (2D or 3D),
 * followed by any number of scalar state variables. Outputs are either a
 * symmetric 2nd-order tensor of the same dimension or a scalar.
 *
 * Fixed invariant ordering:
 *   J = [tr A, sqrt(tr A^2)]            (2D)
 *   J = [tr A, sqrt(tr A^2), tr A^3]    (3D)
 * followed by the scalar inputs in declaration order.
 *
 *   G = [I, A]        (2D, tensor output)
 *   G = [I, A, A^2]   (3D, tensor output)
 *   G = [1]           (scalar output)
 */
#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icecr/errors.hpp"
#include "icecr/tensor.hpp"

namespace icecr {

class InvariantBasis {
public:
  InvariantBasis(std::vector<TensorSignature> inputs, TensorSignature output)
      : inputs_(std::move(inputs)), output_(output) {
    int tensor_inputs = 0;
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
      const auto& s = inputs_[i];
      if (s.order == 0) continue;
      require(s.order == 2 && s.symmetric && (s.dim == 2 || s.dim == 3),
              "unsupported input signature " + s.describe());
      require(i == 0, "the symmetric tensor input must come first");
      tensor_dim_ = s.dim;
      ++tensor_inputs;
    }
    require(tensor_inputs <= 1, "at most one tensor input is tabulated");
    if (output_.order == 2) {
      require(output_.symmetric && tensor_inputs == 1 && output_.dim == tensor_dim_,
              "tensor output requires a tensor input of the same dimension");
    } else {
      require(output_.order == 0, "unsupported output signature " + output_.describe());
    }
  }

  /// One symmetric 2nd-order input and output of dimension dim, plus `extra_scalars` appended states.
  static InvariantBasis symmetric_tensor(int dim, int extra_scalars = 0) {
    std::vector<TensorSignature> in{TensorSignature::make_symmetric(2, dim)};
    for (int i = 0; i < extra_scalars; ++i) in.push_back(TensorSignature::scalar());
    return {std::move(in), TensorSignature::make_symmetric(2, dim)};
  }

  /// Scalar-valued function of one symmetric tensor plus appended scalars.
  static InvariantBasis scalar_of_tensor(int dim, int extra_scalars = 0) {
    std::vector<TensorSignature> in{TensorSignature::make_symmetric(2, dim)};
    for (int i = 0; i < extra_scalars; ++i) in.push_back(TensorSignature::scalar());
    return {std::move(in), TensorSignature::scalar()};
  }

  [[nodiscard]] const std::vector<TensorSignature>& input_signatures() const { return inputs_; }
  [[nodiscard]] const TensorSignature& output_signature() const { return output_; }
  [[nodiscard]] bool has_tensor_input() const { return tensor_dim_ != 0; }
  [[nodiscard]] int tensor_dim() const { return tensor_dim_; }

  [[nodiscard]] int scalar_invariant_count() const {
    int n = tensor_dim_ == 0 ? 0 : tensor_dim_;  // 2 in 2D, 3 in 3D
    for (const auto& s : inputs_)
      if (s.order == 0) ++n;
    return n;
  }

  [[nodiscard]] int form_invariant_count() const {
    return output_.order == 0 ? 1 : output_.dim;
  }

  void check_inputs(std::span<const Tensor> inputs) const {
    require(inputs.size() == inputs_.size(),
            "expected " + std::to_string(inputs_.size()) + " inputs, got " + std::to_string(inputs.size()));
    for (std::size_t i = 0; i < inputs.size(); ++i)
      require(inputs[i].signature() == inputs_[i],
              "input " + std::to_string(i) + " has signature " + inputs[i].signature().describe() +
                  ", expected " + inputs_[i].describe());
  }

private:
  std::vector<TensorSignature> inputs_;
  TensorSignature output_;
  int tensor_dim_ = 0;
};

inline std::vector<double> scalar_invariants(const InvariantBasis& basis, std::span<const Tensor> inputs) {
  basis.check_inputs(inputs);
  std::vector<double> j;
  j.reserve(static_cast<std::size_t>(basis.scalar_invariant_count()));
  if (basis.has_tensor_input()) {
    const Eigen::MatrixXd a = inputs[0].as_matrix();
    const Eigen::MatrixXd a2 = a * a;
    j.push_back(a.trace());
    j.push_back(std::sqrt(std::max(a2.trace(), 0.0)));
    if (basis.tensor_dim() == 3) j.push_back((a2 * a).trace());
  }
  for (const auto& t : inputs)
    if (t.signature().order == 0) j.push_back(t.as_scalar());
  return j;
}

inline std::vector<Tensor> form_invariants(const InvariantBasis& basis, std::span<const Tensor> inputs) {
  basis.check_inputs(inputs);
  if (basis.output_signature().order == 0) return {Tensor::scalar(1.0)};
  const int d = basis.tensor_dim();
  const Eigen::MatrixXd a = inputs[0].as_matrix();
  std::vector<Tensor> g;
  g.push_back(Tensor::from_matrix(Eigen::MatrixXd::Identity(d, d)));
  g.push_back(inputs[0]);
  if (d == 3) g.push_back(Tensor::from_matrix(a * a));
  return g;
}

/// Coefficient function c(J; params); must return form_invariant_count values.
using CoefficientFunction =
    std::function<std::vector<double>(std::span<const double> invariants, std::span<const double> params)>;

struct ConstitutiveRelation {
  InvariantBasis basis;
  CoefficientFunction coefficients;
  std::vector<double> params;
};

inline Tensor wineman_pipkin_eval(const ConstitutiveRelation& cr, std::span<const Tensor> inputs) {
  const auto j = scalar_invariants(cr.basis, inputs);
  const auto g = form_invariants(cr.basis, inputs);
  const auto c = cr.coefficients(j, cr.params);
  require(c.size() == g.size(), "coefficient function returned " + std::to_string(c.size()) +
                                    " values for " + std::to_string(g.size()) + " form invariants");
  Tensor out(cr.basis.output_signature());
  for (std::size_t i = 0; i < g.size(); ++i) out += c[i] * g[i];
  return out;
}

inline Tensor wineman_pipkin_eval(const ConstitutiveRelation& cr, std::initializer_list<Tensor> inputs) {
  return wineman_pipkin_eval(cr, std::span<const Tensor>(inputs.begin(), inputs.size()));
}

/// Elementwise evaluation over a batch of input tuples, in order.
inline std::vector<Tensor> batch_eval(const ConstitutiveRelation& cr,
                                      std::span<const std::vector<Tensor>> batch) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& tuple : batch) out.push_back(wineman_pipkin_eval(cr, std::span<const Tensor>(tuple)));
  return out;
}

}  // namespace icecr
