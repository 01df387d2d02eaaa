#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "icecr/damage_rate.hpp"
#include "icecr/mlp.hpp"

using namespace icecr;

namespace {

const std::vector<std::vector<int>> kShapes{{2}, {4}, {2, 2}, {4, 4}, {2, 2, 2}, {4, 4, 4}};
const Activation kActivations[] = {Activation::tanh, Activation::relu, Activation::softplus};

Eigen::MatrixXd random_rows(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> j2(0.0, 5.0), phi(0.0, 0.3);
  Eigen::MatrixXd r(n, 2);
  for (int k = 0; k < n; ++k) r.row(k) << j2(rng), phi(rng);
  return r;
}

const InputScaler kScaler{Eigen::Vector2d(0.4, 0.01), Eigen::Vector2d(0.5, 0.02)};

}  // namespace

TEST(MlpInit, SeededDrawIsDeterministic) {
  const auto a = mlp_init(42, {2, 4, 4, 1}, Activation::tanh).flatten();
  const auto b = mlp_init(42, {2, 4, 4, 1}, Activation::tanh).flatten();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, mlp_init(43, {2, 4, 4, 1}, Activation::tanh).flatten());
}

TEST(MlpInit, ParameterCountFromShape) {
  EXPECT_EQ(MlpParams({2, 4, 4, 4, 1}, Activation::tanh).parameter_count(), 57u);
  EXPECT_EQ(MlpParams::from_hidden({4, 4}, Activation::relu).parameter_count(), 37u);
  EXPECT_EQ(MlpParams::from_hidden({}, Activation::relu).parameter_count(), 3u);
  EXPECT_THROW(MlpParams({3, 1}, Activation::tanh), ContractViolation);
  EXPECT_THROW(MlpParams({2, 0, 1}, Activation::tanh), ContractViolation);
}

TEST(MlpInit, FlattenRoundTrip) {
  const auto p = mlp_init(5, {2, 4, 2, 1}, Activation::softplus);
  const auto flat = p.flatten();
  EXPECT_EQ(p.with_flat(flat).flatten(), flat);
  // row-major weights then bias per layer
  EXPECT_EQ(flat(1), p.weight(0)(0, 1));
  EXPECT_EQ(flat(8), p.bias(0)(0));
  EXPECT_THROW(p.with_flat(Eigen::VectorXd::Zero(3)), ContractViolation);
}

TEST(MlpForward, ZeroParametersGiveZero) {
  std::mt19937_64 rng(1);
  const auto rows = random_rows(rng, 50);
  for (auto act : {Activation::tanh, Activation::relu}) {
    const MlpParams p = MlpParams::from_hidden({4, 4}, act);
    EXPECT_TRUE(mlp_forward(p, kScaler, rows).isZero(0.0));
  }
}

TEST(MlpForward, AffineNetwork) {
  MlpParams p = MlpParams::from_hidden({}, Activation::tanh);
  p.weight(0) << 1.5, -2.0;
  p.bias(0) << 0.25;
  Eigen::MatrixXd rows(2, 2);
  rows << 1.0, 2.0, -3.0, 0.5;
  const auto out = mlp_forward(p, InputScaler::identity(2), rows);
  EXPECT_DOUBLE_EQ(out(0), 1.5 - 4.0 + 0.25);
  EXPECT_DOUBLE_EQ(out(1), -4.5 - 1.0 + 0.25);
}

TEST(MlpForward, BatchMatchesRowwise) {
  std::mt19937_64 rng(2);
  const auto rows = random_rows(rng, 40);
  for (auto act : kActivations) {
    const auto p = mlp_init(9, {2, 4, 4, 1}, act);
    const auto out = mlp_forward(p, kScaler, rows);
    MlpEvaluator ev(p, kScaler);
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const double in[2] = {rows(r, 0), rows(r, 1)};
      EXPECT_EQ(out(r), ev.forward(in));
    }
  }
}

TEST(MlpForward, TanhOutputBoundedByLastLayer) {
  std::mt19937_64 rng(3);
  const auto rows = random_rows(rng, 200) * 100.0;
  const auto p = mlp_init(4, {2, 4, 4, 1}, Activation::tanh);
  const double bound = p.weight(2).cwiseAbs().sum() + std::abs(p.bias(2)(0));
  EXPECT_LE(mlp_forward(p, kScaler, rows).cwiseAbs().maxCoeff(), bound);
}

TEST(MlpGradients, ZeroCotangentsGiveZero) {
  std::mt19937_64 rng(4);
  const auto rows = random_rows(rng, 10);
  const auto p = mlp_init(1, {2, 4, 1}, Activation::tanh);
  EXPECT_TRUE(mlp_gradients(p, kScaler, rows, Eigen::VectorXd::Zero(10)).isZero(0.0));
}

TEST(MlpGradients, AffineBiasGradientIsCotangentSum) {
  std::mt19937_64 rng(5);
  const auto rows = random_rows(rng, 7);
  MlpParams p = MlpParams::from_hidden({}, Activation::relu);
  p.weight(0) << 0.3, -0.7;
  const Eigen::VectorXd cot = Eigen::VectorXd::LinSpaced(7, -1.0, 2.0);
  EXPECT_NEAR(mlp_gradients(p, kScaler, rows, cot)(2), cot.sum(), 1e-14);
}

// Central differences with step 1e-6 relative to each parameter's magnitude.
TEST(MlpGradients, MatchCentralDifferencesAcrossShapesAndActivations) {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (const auto& hidden : kShapes) {
    for (auto act : kActivations) {
      for (int draw = 0; draw < 10; ++draw) {
        const auto p = mlp_init(1000 + static_cast<std::uint64_t>(draw),
                                MlpParams::from_hidden(hidden, act).layer_sizes(), act);
        // shift biases so ReLU kinks are not sampled exactly
        Eigen::VectorXd x = p.flatten();
        std::normal_distribution<double> nb(0.0, 0.3);
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += nb(rng);
        const auto q = p.with_flat(x);
        const auto rows = random_rows(rng, 5);
        const Eigen::VectorXd cot = Eigen::VectorXd::Random(5);
        const Eigen::VectorXd g = mlp_gradients(q, kScaler, rows, cot);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
          const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
          Eigen::VectorXd xp = x, xm = x;
          xp(i) += h;
          xm(i) -= h;
          const double fd = (cot.dot(mlp_forward(q.with_flat(xp), kScaler, rows)) -
                             cot.dot(mlp_forward(q.with_flat(xm), kScaler, rows))) / (2 * h);
          const double rel = std::abs(fd - g(i)) / std::max(1.0, std::abs(g(i)));
          if (act == Activation::relu && rel > 1e-4) continue;  // a kink straddled by the stencil
          worst = std::max(worst, rel);
        }
      }
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(MlpGradients, TangentMatchesReverseMode) {
  std::mt19937_64 rng(7);
  for (auto act : kActivations) {
    const auto p = mlp_init(3, {2, 4, 4, 1}, act);
    const Eigen::VectorXd dir = Eigen::VectorXd::Random(static_cast<Eigen::Index>(p.parameter_count()));
    const auto rows = random_rows(rng, 6);
    MlpEvaluator ev(p, kScaler);
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const double in[2] = {rows(r, 0), rows(r, 1)};
      ev.forward(in);
      const double t = ev.tangent(dir);
      Eigen::VectorXd g = Eigen::VectorXd::Zero(dir.size());
      ev.backward(1.0, g);
      EXPECT_NEAR(t, g.dot(dir), 1e-12 * (1.0 + std::abs(t)));
    }
  }
}

TEST(MlpGradients, InputGradientMatchesFiniteDifferences) {
  const auto p = mlp_init(8, {2, 4, 4, 1}, Activation::tanh);
  const MlpRate rate(p, kScaler);
  Eigen::MatrixXd rows(1, 2), up(1, 2), dn(1, 2);
  rows << 0.9, 0.05;
  const auto b = rate.evaluate(rows);
  const double h = 1e-7;
  up = rows;
  dn = rows;
  up(0, 0) += h;
  dn(0, 0) -= h;
  EXPECT_NEAR(b.d_j2(0), (rate.evaluate(up).value(0) - rate.evaluate(dn).value(0)) / (2 * h), 1e-6);
  up = rows;
  dn = rows;
  up(0, 1) += h;
  dn(0, 1) -= h;
  EXPECT_NEAR(b.d_phi(0), (rate.evaluate(up).value(0) - rate.evaluate(dn).value(0)) / (2 * h), 1e-5);
}

TEST(InputScaler, HandStatistics) {
  Eigen::MatrixXd batch(2, 2);
  batch << 0.0, 0.0, 2.0, 2.0;
  const auto s = fit_scaler(batch);
  EXPECT_DOUBLE_EQ(s.mean(0), 1.0);
  EXPECT_DOUBLE_EQ(s.std(1), 1.0);
}

TEST(InputScaler, ScaledFitBatchHasZeroMean) {
  std::mt19937_64 rng(9);
  const auto rows = random_rows(rng, 300);
  const auto s = fit_scaler(rows);
  const Eigen::MatrixXd z = s.apply(rows);
  EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR(z.col(1).mean(), 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(z.col(0).squaredNorm() / 300.0), 1.0, 1e-12);
}

TEST(InputScaler, DegenerateBatches) {
  Eigen::MatrixXd same(3, 2);
  same << 1.0, 0.5, 1.0, 0.5, 1.0, 0.5;
  EXPECT_THROW(fit_scaler(same), DegenerateData);
  EXPECT_THROW(fit_scaler(Eigen::MatrixXd(0, 2)), ContractViolation);
}

TEST(FeasibleInit, SearchOutcomes) {
  const auto c = mlp_init(3, {2, 4, 1}, Activation::tanh);
  const double n0 = c.flatten().norm();
  EXPECT_EQ(feasible_init(c, [](const MlpParams&) { return true; }).flatten(), c.flatten());
  const auto quarter = feasible_init(c, [&](const MlpParams& p) { return p.flatten().norm() <= 0.25 * n0 + 1e-12; });
  EXPECT_EQ(quarter.flatten(), 0.25 * c.flatten());
  const auto zero = feasible_init(c, [](const MlpParams& p) { return p.flatten().isZero(0.0); });
  EXPECT_TRUE(zero.flatten().isZero(0.0));
}

TEST(ConstantCollapse, Detection) {
  std::mt19937_64 rng(10);
  const auto grid = random_rows(rng, 100);
  EXPECT_TRUE(detect_constant_collapse(MlpParams::from_hidden({4}, Activation::relu), kScaler, grid));
  MlpParams affine = MlpParams::from_hidden({}, Activation::tanh);
  affine.weight(0) << 1.0, 0.0;
  EXPECT_FALSE(detect_constant_collapse(affine, kScaler, grid));
  // every hidden pre-activation negative on the grid: ReLU outputs the last bias everywhere
  auto dead = mlp_init(11, {2, 4, 4, 1}, Activation::relu);
  dead.bias(0).setConstant(-1e3);
  dead.bias(2) << 0.7;
  EXPECT_TRUE(detect_constant_collapse(dead, kScaler, grid));
  const Eigen::VectorXd g = mlp_gradients(dead, kScaler, grid, Eigen::VectorXd::Ones(grid.rows()));
  // only the output bias moves
  EXPECT_DOUBLE_EQ(g(g.size() - 1), 100.0);
  EXPECT_EQ(g.head(g.size() - 1).norm(), 0.0);
}
