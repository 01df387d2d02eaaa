#include <gtest/gtest.h>

#include <random>

#include "icecr/optimizer.hpp"

using namespace icecr;

namespace {

struct Quadratic {
  Eigen::MatrixXd H;
  Eigen::VectorXd a;

  explicit Quadratic(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd m(n, n);
    for (auto& v : m.reshaped()) v = g(rng);
    H = m * m.transpose() + n * Eigen::MatrixXd::Identity(n, n);
    a.resize(n);
    for (auto& v : a) v = g(rng);
  }

  FunctionObjective objective(double fail_radius = -1.0) const {
    return FunctionObjective([this, fail_radius](const Eigen::VectorXd& x, Eigen::VectorXd* grad) -> Evaluation {
      if (fail_radius > 0.0 && (x - a).norm() > fail_radius) return {1e12, true};
      const Eigen::VectorXd d = x - a;
      if (grad != nullptr) *grad = 2.0 * H * d;
      return {d.dot(H * d), false};
    });
  }
};

}  // namespace

TEST(Bfgs, QuadraticConvergesToOptimum) {
  for (int n : {2, 3, 5}) {
    const Quadratic q(n, static_cast<std::uint64_t>(n));
    auto obj = q.objective();
    OptimizerSettings s;
    s.gradient_tolerance = 1e-14;
    const auto r = bfgs_minimize(obj, Eigen::VectorXd::Zero(n), s);
    EXPECT_LT((r.x - q.a).norm(), 1e-10) << "n=" << n;
    EXPECT_NE(r.termination, Termination::line_search_failure);
    EXPECT_NE(r.termination, Termination::max_iter);
  }
}

// Reference: scipy.optimize.minimize(method="BFGS", gtol=1e-14) on the same H, a
// (matrices exported from this fixture), iteration counts and leading losses.
TEST(Bfgs, QuadraticTraceMatchesReferenceImplementation) {
  struct Ref {
    int n;
    int iterations;
    std::vector<double> losses;
  };
  const std::vector<Ref> refs{
      {3, 11, {5.7621398205413854, 4.4227043942338442, 2.4484778271283294, 1.4893989958841565, 0.29449405536178247,
               0.00064483048138397651}},
      {5, 9, {4.2880291531866366, 0.54688445460383128, 0.38783211079091173, 0.15462344549902565,
              0.055458813061027568, 0.041510646773678564}}};
  for (const auto& ref : refs) {
    const Quadratic q(ref.n, static_cast<std::uint64_t>(ref.n));
    auto obj = q.objective();
    OptimizerSettings s;
    s.gradient_tolerance = 1e-14;
    const auto r = bfgs_minimize(obj, Eigen::VectorXd::Zero(ref.n), s);
    EXPECT_EQ(r.iterations, ref.iterations) << "n=" << ref.n;
    ASSERT_GE(r.trace.size(), ref.losses.size());
    for (std::size_t k = 0; k < ref.losses.size(); ++k)
      EXPECT_NEAR(r.trace[k].loss, ref.losses[k], 1e-9 * (1.0 + ref.losses[k])) << "n=" << ref.n << " k=" << k;
  }
}

TEST(Bfgs, AcceptedLossIsNonincreasing) {
  const Quadratic q(6, 11);
  auto obj = q.objective();
  const auto r = bfgs_minimize(obj, Eigen::VectorXd::Constant(6, 3.0));
  for (std::size_t k = 1; k < r.trace.size(); ++k) EXPECT_LE(r.trace[k].loss, r.trace[k - 1].loss);
}

TEST(Bfgs, NeverAcceptsFailedRegion) {
  const Quadratic q(3, 4);
  const double radius = 5.0;
  auto obj = q.objective(radius);
  const Eigen::VectorXd x0 = q.a + Eigen::VectorXd::Constant(3, 2.0);
  const auto r = bfgs_minimize(obj, x0);
  EXPECT_LE((r.x - q.a).norm(), radius);
  EXPECT_EQ(obj.gradient_at_failed, 0);
  EXPECT_LT((r.x - q.a).norm(), 1e-6);
}

TEST(Bfgs, StationaryStartStopsImmediately) {
  const Quadratic q(4, 9);
  auto obj = q.objective();
  const auto r = bfgs_minimize(obj, q.a);
  EXPECT_EQ(r.termination, Termination::gradient_tol);
  EXPECT_EQ(r.iterations, 0);
}

TEST(TrustRegionBfgs, QuadraticMatchesBfgs) {
  const Quadratic q(5, 21);
  auto o1 = q.objective();
  auto o2 = q.objective();
  OptimizerSettings s;
  s.gradient_tolerance = 1e-13;
  const auto a = bfgs_minimize(o1, Eigen::VectorXd::Zero(5), s);
  const auto b = trust_region_bfgs_minimize(o2, Eigen::VectorXd::Zero(5), s);
  EXPECT_LT((a.x - b.x).norm(), 1e-8);
  EXPECT_LT((b.x - q.a).norm(), 1e-8);
}

TEST(TrustRegionBfgs, StaysInsideRadiusAndShrinksOnRejection) {
  const Quadratic q(3, 8);
  auto obj = q.objective(1.5);
  OptimizerSettings s;
  s.initial_radius = 10.0;
  const Eigen::VectorXd x0 = q.a + Eigen::VectorXd::Constant(3, 0.5);
  const auto r = trust_region_bfgs_minimize(obj, x0, s);
  EXPECT_EQ(obj.gradient_at_failed, 0);
  bool saw_rejection = false;
  for (std::size_t k = 0; k < r.trials.size(); ++k) {
    EXPECT_LE(r.trials[k].step_norm, r.trials[k].radius * (1.0 + 1e-12));
    if (!r.trials[k].accepted && r.trials[k].ratio < 0.25 && k + 1 < r.trials.size()) {
      saw_rejection = true;
      EXPECT_LT(r.trials[k + 1].radius, r.trials[k].radius);
    }
  }
  EXPECT_TRUE(saw_rejection);
  EXPECT_LT((r.x - q.a).norm(), 1e-6);
}
