#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "icecr/damage_rate.hpp"
#include "icecr/invariants.hpp"
#include "icecr/models.hpp"

using namespace icecr;

namespace {

Tensor random_symmetric(std::mt19937_64& rng, int dim, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd a(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) a(i, j) = n(rng);
  return Tensor::from_matrix(0.5 * (a + a.transpose()));
}

Eigen::Matrix3d random_rotation3(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

double rel_dev(const Tensor& a, const Tensor& b) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.packed().size(); ++i) {
    diff = std::max(diff, std::abs(a.packed()[i] - b.packed()[i]));
    ref = std::max(ref, std::abs(b.packed()[i]));
  }
  return diff / std::max(ref, 1e-300);
}

}  // namespace

TEST(InvariantBasis, CountsFor2dAnd3d) {
  const auto b2 = InvariantBasis::symmetric_tensor(2);
  EXPECT_EQ(b2.scalar_invariant_count(), 2);
  EXPECT_EQ(b2.form_invariant_count(), 2);
  const auto b3 = InvariantBasis::symmetric_tensor(3);
  EXPECT_EQ(b3.scalar_invariant_count(), 3);
  EXPECT_EQ(b3.form_invariant_count(), 3);
  EXPECT_EQ(InvariantBasis::symmetric_tensor(2, 1).scalar_invariant_count(), 3);
}

TEST(InvariantBasis, RejectsUnsupportedSignatures) {
  EXPECT_THROW(InvariantBasis({TensorSignature{2, 2, false}}, TensorSignature::scalar()), ContractViolation);
  EXPECT_THROW(InvariantBasis({TensorSignature::make_symmetric(2, 2)}, TensorSignature::make_symmetric(2, 3)),
               ContractViolation);
}

TEST(ScalarInvariants, HandValuesAndAppendedState) {
  const auto basis = InvariantBasis::symmetric_tensor(2, 1);
  const std::vector<Tensor> in{Tensor::from_matrix((Eigen::Matrix2d() << 1, 0, 0, 2).finished()), Tensor::scalar(0.3)};
  const auto j = scalar_invariants(basis, in);
  ASSERT_EQ(j.size(), 3u);
  EXPECT_DOUBLE_EQ(j[0], 3.0);
  EXPECT_DOUBLE_EQ(j[1], std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(j[2], 0.3);
}

TEST(ScalarInvariants, WrongInputSignatureIsContractViolation) {
  const auto basis = InvariantBasis::symmetric_tensor(2);
  const std::vector<Tensor> in{Tensor::scalar(1.0)};
  EXPECT_THROW(scalar_invariants(basis, in), ContractViolation);
}

TEST(FrameInvariance, ScalarInvariantsUnderRandomRotations) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  const auto basis = InvariantBasis::symmetric_tensor(2);
  for (int k = 0; k < 200; ++k) {
    const Tensor a = random_symmetric(rng, 2);
    const Tensor ra = rotate(a, rotation2d(angle(rng)));
    const auto j = scalar_invariants(basis, std::vector<Tensor>{a});
    const auto jr = scalar_invariants(basis, std::vector<Tensor>{ra});
    for (std::size_t i = 0; i < j.size(); ++i) EXPECT_NEAR(jr[i], j[i], 1e-12 * (1.0 + std::abs(j[i])));
  }
}

TEST(FrameInvariance, ZooAndNetworkRelationsAreEquivariant) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI), phi_d(0.0, 0.9);
  const GlenParams gp;
  const DamageParams dp;
  std::vector<ConstitutiveRelation> crs{glen_cr(2, gp), damaged_glen_cr(2, gp, dp), albrecht_levermann_cr(2, dp)};
  const InputScaler scaler{Eigen::Vector2d(1.0, 0.2), Eigen::Vector2d(0.5, 0.3)};
  const std::vector<std::vector<int>> shapes{{2}, {4}, {2, 2}, {4, 4}, {2, 2, 2}, {4, 4, 4}};
  for (int k = 0; k < 20; ++k) {
    const auto act = static_cast<Activation>(k % 3);
    const auto p = mlp_init(100 + static_cast<std::uint64_t>(k),
                            MlpParams::from_hidden(shapes[static_cast<std::size_t>(k) % shapes.size()], act).layer_sizes(), act);
    crs.push_back(neural_cr(p, scaler, 2, k % 2 == 0));
  }
  double worst = 0.0;
  for (const auto& cr : crs) {
    for (int r = 0; r < 200; ++r) {
      const Eigen::Matrix2d q = rotation2d(angle(rng));
      const Tensor e = random_symmetric(rng, 2);
      const Tensor phi = Tensor::scalar(phi_d(rng));
      std::vector<Tensor> in{e}, rin{rotate(e, q)};
      if (cr.basis.input_signatures().size() == 2) {
        in.push_back(phi);
        rin.push_back(phi);
      }
      const Tensor out = wineman_pipkin_eval(cr, std::span<const Tensor>(in));
      const Tensor rout = wineman_pipkin_eval(cr, std::span<const Tensor>(rin));
      worst = std::max(worst, rel_dev(rout, rotate(out, q)));
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(FrameInvariance, EstarIsEquivariantIn3d) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  const EstarParams p;
  for (int k = 0; k < 200; ++k) {
    const Eigen::Matrix3d q = random_rotation3(rng);
    Eigen::Matrix3d e = random_symmetric(rng, 3).as_matrix();
    e -= e.trace() / 3.0 * Eigen::Matrix3d::Identity();
    const Eigen::Vector3d w(n(rng), n(rng), n(rng)), u(n(rng), n(rng), n(rng));
    const Tensor s = estar_stress(Tensor::from_matrix(e), Tensor::from_vector(w), Tensor::from_vector(u), p);
    // vorticity is an axial vector; proper rotations transform it like a vector
    const Tensor rs = estar_stress(Tensor::from_matrix(q * e * q.transpose()), Tensor::from_vector(q * w),
                                   Tensor::from_vector(q * u), p);
    EXPECT_LT(rel_dev(rs, rotate(s, q)), 1e-10);
  }
}

TEST(FrameInvariance, Damage2RateIsInvariant) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  Damage2Params p;
  p.tau_0 = 0.5;
  for (int k = 0; k < 200; ++k) {
    const Eigen::Matrix2d q = rotation2d(angle(rng));
    const Tensor e = random_symmetric(rng, 2, 2.0), de = random_symmetric(rng, 2);
    const double s = damage2_rate(e, de, 0.1, p);
    const double rs = damage2_rate(rotate(e, q), rotate(de, q), 0.1, p);
    EXPECT_NEAR(rs, s, 1e-10 * (1.0 + std::abs(s)));
  }
}

TEST(WinemanPipkin, BatchMatchesScalarPathBitwise) {
  std::mt19937_64 rng(3);
  const auto cr = damaged_glen_cr(2, GlenParams{}, DamageParams{});
  std::vector<std::vector<Tensor>> batch;
  for (int k = 0; k < 100; ++k) batch.push_back({random_symmetric(rng, 2), Tensor::scalar(0.01 * k)});
  const auto out = batch_eval(cr, batch);
  ASSERT_EQ(out.size(), batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const Tensor single = wineman_pipkin_eval(cr, std::span<const Tensor>(batch[k]));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[k].packed()[i], single.packed()[i]);
  }
  const std::vector<std::vector<Tensor>> one{batch[0]};
  EXPECT_EQ(batch_eval(cr, one).size(), 1u);
}

TEST(WinemanPipkin, GlenMatchesDirectFlowLaw) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> scale(-3.0, 3.0);
  const GlenParams p{1.7, 3.0, 1e-12};
  double worst = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Tensor e = random_symmetric(rng, 2, std::pow(10.0, scale(rng)));
    const Eigen::Matrix2d m = e.as_matrix();
    const double norm2 = (m.transpose() * m).trace();
    const Eigen::Matrix2d direct = p.mu * std::pow(norm2 + p.eps_reg, (1.0 / p.n - 1.0) / 2.0) * m;
    worst = std::max(worst, rel_dev(glen_stress(e, p), Tensor::from_matrix(direct)));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(ScalarInvariants, ZeroIdentityAndTraceless2d) {
  const auto basis = InvariantBasis::symmetric_tensor(2);
  auto j_of = [&](const Eigen::Matrix2d& m) {
    const std::vector<Tensor> in{Tensor::from_matrix(m)};
    return scalar_invariants(basis, in);
  };
  EXPECT_EQ(j_of(Eigen::Matrix2d::Zero()), (std::vector<double>{0.0, 0.0}));
  const auto ji = j_of(Eigen::Matrix2d::Identity());
  EXPECT_DOUBLE_EQ(ji[0], 2.0);
  EXPECT_DOUBLE_EQ(ji[1], std::sqrt(2.0));
  const auto jd = j_of(Eigen::Vector2d(1.0, -1.0).asDiagonal());
  EXPECT_DOUBLE_EQ(jd[0], 0.0);
  EXPECT_DOUBLE_EQ(jd[1], std::sqrt(2.0));
}

TEST(FormInvariants, GeneratorsForHandInputs) {
  const auto b2 = InvariantBasis::symmetric_tensor(2);
  const Eigen::Matrix2d swap = (Eigen::Matrix2d() << 0, 1, 1, 0).finished();
  const std::vector<Tensor> in2{Tensor::from_matrix(swap)};
  const auto g2 = form_invariants(b2, in2);
  ASSERT_EQ(g2.size(), 2u);
  EXPECT_TRUE(g2[0].as_matrix().isApprox(Eigen::Matrix2d::Identity()));
  EXPECT_TRUE(g2[1].as_matrix().isApprox(swap));
  const auto b3 = InvariantBasis::symmetric_tensor(3);
  const std::vector<Tensor> in3{Tensor::from_matrix(Eigen::Matrix3d::Identity())};
  for (const auto& g : form_invariants(b3, in3)) EXPECT_TRUE(g.as_matrix().isApprox(Eigen::Matrix3d::Identity()));
}

TEST(WinemanPipkin, ConstantCoefficients) {
  std::mt19937_64 rng(13);
  const auto basis = InvariantBasis::symmetric_tensor(2);
  const ConstitutiveRelation zero{basis, [](std::span<const double>, std::span<const double>) {
                                    return std::vector<double>{0.0, 0.0};
                                  }, {}};
  const ConstitutiveRelation ident{basis, [](std::span<const double>, std::span<const double>) {
                                     return std::vector<double>{1.0, 0.0};
                                   }, {}};
  for (int k = 0; k < 10; ++k) {
    const Tensor e = random_symmetric(rng, 2);
    EXPECT_EQ(wineman_pipkin_eval(zero, {e}).norm(), 0.0);
    EXPECT_TRUE(wineman_pipkin_eval(ident, {e}).as_matrix().isApprox(Eigen::Matrix2d::Identity()));
  }
  const ConstitutiveRelation bad{basis, [](std::span<const double>, std::span<const double>) {
                                   return std::vector<double>{1.0};
                                 }, {}};
  EXPECT_THROW(wineman_pipkin_eval(bad, {random_symmetric(rng, 2)}), ContractViolation);
}

TEST(WinemanPipkin, GlenHandValueOnTracelessDiagonal) {
  const Tensor e = Tensor::from_matrix(Eigen::Matrix2d(Eigen::Vector2d(1.0, -1.0).asDiagonal()));
  const Tensor s = wineman_pipkin_eval(glen_cr(2, GlenParams{1.0, 3.0, 0.0}), {e});
  const double f = std::pow(2.0, -1.0 / 3.0);
  EXPECT_NEAR(s.as_matrix()(0, 0), f, 1e-15);
  EXPECT_NEAR(s.as_matrix()(1, 1), -f, 1e-15);
  EXPECT_EQ(s.as_matrix()(0, 1), 0.0);
}

TEST(WinemanPipkin, EmptyBatch) {
  const std::vector<std::vector<Tensor>> none;
  EXPECT_TRUE(batch_eval(glen_cr(2, GlenParams{}), none).empty());
}
