/**
 * @file optimizer.hpp
 * @brief Dense BFGS (strong-Wolfe line search) and trust-region BFGS (dogleg) minimizers.
 *
 * Objectives may report a failed evaluation; such points count as a large loss and
 * their gradient is never requested.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icecr/errors.hpp"

namespace icecr {

struct Evaluation {
  double value = 0.0;
  bool failed = false;
};

class Objective {
public:
  virtual ~Objective() = default;
  virtual Evaluation value(const Eigen::VectorXd& x) = 0;
  /// Only called at the point of the most recent successful value() call.
  virtual Eigen::VectorXd gradient(const Eigen::VectorXd& x) = 0;
};

/// Objective from a closure returning (value, failed) and filling the gradient on request.
class FunctionObjective final : public Objective {
public:
  using Fn = std::function<Evaluation(const Eigen::VectorXd&, Eigen::VectorXd*)>;
  explicit FunctionObjective(Fn fn) : fn_(std::move(fn)) {}

  Evaluation value(const Eigen::VectorXd& x) override {
    ++value_calls;
    points.push_back(x);
    return fn_(x, nullptr);
  }
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) override {
    ++gradient_calls;
    Eigen::VectorXd g(x.size());
    const auto e = fn_(x, &g);
    if (e.failed) ++gradient_at_failed;
    return g;
  }

  int value_calls = 0;
  int gradient_calls = 0;
  int gradient_at_failed = 0;
  std::vector<Eigen::VectorXd> points;  ///< every evaluated point, in order

private:
  Fn fn_;
};

enum class OptimizerKind { bfgs, trust_region_bfgs };
enum class Termination { gradient_tol, step_stall, max_iter, line_search_failure };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::bfgs ? "bfgs" : "tr-bfgs"; }
inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "bfgs" || s == "BFGS") return OptimizerKind::bfgs;
  if (s == "tr-bfgs" || s == "trust-region-bfgs" || s == "tr_bfgs") return OptimizerKind::trust_region_bfgs;
  throw ContractViolation("unknown optimizer '" + s + "'");
}
inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::gradient_tol: return "gradient_tol";
    case Termination::step_stall: return "step_stall";
    case Termination::max_iter: return "max_iter";
    case Termination::line_search_failure: return "line_search_failure";
  }
  return "?";
}
inline Termination parse_termination(const std::string& s) {
  for (auto t : {Termination::gradient_tol, Termination::step_stall, Termination::max_iter,
                 Termination::line_search_failure})
    if (to_string(t) == s) return t;
  throw ContractViolation("unknown termination reason '" + s + "'");
}

struct OptimizerSettings {
  double gradient_tolerance = 1e-8;  ///< on ||g||_inf / (1 + |f|)
  double step_tolerance = 1e-12;     ///< on ||dx|| / (1 + ||x||)
  int max_iterations = 500;
  double c1 = 1e-4;
  double c2 = 0.9;
  int line_search_max_iterations = 30;
  double initial_radius = 1.0;
  double max_radius = 1e3;
  double accept_ratio = 1e-4;
};

struct TraceEntry {
  double loss = 0.0;
  double gradient_norm = 0.0;
  double step_norm = 0.0;
};

struct TrialEntry {
  double step_norm = 0.0;
  double radius = 0.0;  ///< trust radius when the trial was proposed (0 for line search)
  double ratio = 0.0;   ///< actual/predicted reduction (trust region) or alpha (line search)
  bool failed = false;
  bool accepted = false;
};

struct OptimizationResult {
  Eigen::VectorXd x;
  double loss = 0.0;
  Eigen::VectorXd gradient;
  Termination termination = Termination::max_iter;
  int iterations = 0;
  std::vector<TraceEntry> trace;  ///< one entry per accepted iterate, starting with the initial point
  std::vector<TrialEntry> trials;
};

namespace detail {

inline double cubic_min(double a, double fa, double fpa, double b, double fb, double c, double fc) {
  // minimizer of the cubic through (a, fa, fpa), (b, fb), (c, fc)
  const double db = b - a, dc = c - a;
  const double denom = (db * dc) * (db * dc) * (db - dc);
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double r1 = fb - fa - fpa * db, r2 = fc - fa - fpa * dc;
  const double A = (dc * dc * r1 - db * db * r2) / denom;
  const double B = (-dc * dc * dc * r1 + db * db * db * r2) / denom;
  const double rad = B * B - 3.0 * A * fpa;
  if (A == 0.0 || rad < 0.0) return std::numeric_limits<double>::quiet_NaN();
  return a + (-B + std::sqrt(rad)) / (3.0 * A);
}

inline double quad_min(double a, double fa, double fpa, double b, double fb) {
  const double db = b - a;
  const double B = (fb - fa - fpa * db) / (db * db);
  if (!(B > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return a - fpa / (2.0 * B);
}

struct LineSearchState {
  Objective& f;
  const Eigen::VectorXd& x;
  const Eigen::VectorXd& p;
  double f0, g0;
  const OptimizerSettings& s;
  std::vector<TrialEntry>& trials;
  // best accepted point
  double alpha = 0.0, fa = 0.0;
  Eigen::VectorXd grad{};
  bool stalled = false;  ///< bracket shrank below the step tolerance

  /// phi(alpha); failed points are +infinity-like
  double phi(double a, bool& failed) {
    const auto e = f.value(x + a * p);
    failed = e.failed;
    trials.push_back({a * p.norm(), 0.0, a, e.failed, false});
    return e.value;
  }
  double dphi(double a, Eigen::VectorXd& g) {
    g = f.gradient(x + a * p);
    return g.dot(p);
  }

  bool zoom(double lo, double flo, double dlo, double hi, double fhi, Eigen::VectorXd glo = {}) {
    double prev = 0.0, fprev = f0;
    for (int it = 0; it < s.line_search_max_iterations; ++it) {
      const double d = hi - lo;
      const double a = std::min(lo, hi), b = std::max(lo, hi);
      double t = std::numeric_limits<double>::quiet_NaN();
      if (it > 0) {
        t = cubic_min(lo, flo, dlo, hi, fhi, prev, fprev);
        const double cchk = 0.2 * std::abs(d);
        if (!(std::isfinite(t) && t > a + cchk && t < b - cchk)) t = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(t)) {
        t = quad_min(lo, flo, dlo, hi, fhi);
        const double qchk = 0.1 * std::abs(d);
        if (!(std::isfinite(t) && t > a + qchk && t < b - qchk)) t = lo + 0.5 * d;
      }
      bool failed = false;
      const double ft = phi(t, failed);
      if (failed || ft > f0 + s.c1 * t * g0 || ft >= flo) {
        prev = hi;
        fprev = fhi;
        hi = t;
        fhi = ft;
      } else {
        Eigen::VectorXd g;
        const double dt = dphi(t, g);
        if (std::abs(dt) <= -s.c2 * g0) {
          accept(t, ft, std::move(g));
          return true;
        }
        if (dt * (hi - lo) >= 0.0) {
          prev = hi;
          fprev = fhi;
          hi = lo;
          fhi = flo;
        } else {
          prev = lo;
          fprev = flo;
        }
        lo = t;
        flo = ft;
        dlo = dt;
        glo = std::move(g);
      }
      if (std::abs(hi - lo) * p.norm() <= s.step_tolerance * (1.0 + x.norm())) {
        stalled = true;
        break;
      }
    }
    // keep a sufficient-decrease point even if the curvature condition was not met
    if (lo > 0.0 && glo.size() > 0 && flo < f0) {
      stalled = false;
      alpha = lo;
      fa = flo;
      grad = std::move(glo);
      return true;
    }
    return false;
  }

  void accept(double a, double fa_, Eigen::VectorXd g) {
    alpha = a;
    fa = fa_;
    grad = std::move(g);
    trials.back().accepted = true;
  }

  /// Strong-Wolfe search, Nocedal-Wright algorithm 3.5 with interpolating zoom.
  bool search(double a1) {
    double a0 = 0.0, fa0 = f0, da0 = g0;
    Eigen::VectorXd ga0;
    for (int it = 0; it < s.line_search_max_iterations; ++it) {
      bool failed = false;
      const double f1 = phi(a1, failed);
      if (failed || f1 > f0 + s.c1 * a1 * g0 || (it > 0 && f1 >= fa0)) return zoom(a0, fa0, da0, a1, f1, ga0);
      Eigen::VectorXd g;
      const double d1 = dphi(a1, g);
      if (std::abs(d1) <= -s.c2 * g0) {
        accept(a1, f1, std::move(g));
        return true;
      }
      if (d1 >= 0.0) return zoom(a1, f1, d1, a0, fa0, g);
      a0 = a1;
      fa0 = f1;
      da0 = d1;
      ga0 = std::move(g);
      a1 *= 2.0;
    }
    return false;
  }
};

inline double inf_norm(const Eigen::VectorXd& g) { return g.size() == 0 ? 0.0 : g.cwiseAbs().maxCoeff(); }

}  // namespace detail

inline OptimizationResult bfgs_minimize(Objective& f, const Eigen::VectorXd& x0, const OptimizerSettings& s = {}) {
  OptimizationResult r;
  r.x = x0;
  const auto e0 = f.value(x0);
  r.loss = e0.value;
  if (e0.failed) {
    r.termination = Termination::line_search_failure;
    r.trace.push_back({r.loss, std::numeric_limits<double>::infinity(), 0.0});
    return r;
  }
  r.gradient = f.gradient(x0);
  r.trace.push_back({r.loss, detail::inf_norm(r.gradient), 0.0});
  const auto n = x0.size();
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  double f_prev = r.loss + 0.5 * r.gradient.norm();

  for (int k = 0;; ++k) {
    r.iterations = k;
    if (detail::inf_norm(r.gradient) <= s.gradient_tolerance * (1.0 + std::abs(r.loss))) {
      r.termination = Termination::gradient_tol;
      return r;
    }
    if (k >= s.max_iterations) {
      r.termination = Termination::max_iter;
      return r;
    }
    Eigen::VectorXd p = -H * r.gradient;
    double g0 = r.gradient.dot(p);
    if (!(g0 < 0.0)) {
      H.setIdentity();
      p = -r.gradient;
      g0 = r.gradient.dot(p);
    }
    const double a1 = std::min(1.0, 1.01 * 2.0 * (r.loss - f_prev) / g0);
    detail::LineSearchState ls{f, r.x, p, r.loss, g0, s, r.trials};
    const bool ok = ls.search(a1 > 0.0 ? a1 : 1.0);
    if (!ok) {
      r.termination = ls.stalled ? Termination::step_stall : Termination::line_search_failure;
      return r;
    }
    const Eigen::VectorXd step = ls.alpha * p;
    const Eigen::VectorXd y = ls.grad - r.gradient;
    f_prev = r.loss;
    r.x += step;
    r.loss = ls.fa;
    r.gradient = ls.grad;
    r.trace.push_back({r.loss, detail::inf_norm(r.gradient), step.norm()});
    if (step.norm() <= s.step_tolerance * (1.0 + r.x.norm())) {
      r.iterations = k + 1;
      r.termination = Termination::step_stall;
      return r;
    }
    const double sy = step.dot(y);
    if (sy > 1e-12 * step.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * step * y.transpose()) * H * (I - rho * y * step.transpose()) + rho * step * step.transpose();
    }
  }
}

/// Dogleg step for the model g.p + p.B.p / 2 within ||p|| <= radius.
inline Eigen::VectorXd dogleg_step(const Eigen::MatrixXd& B, const Eigen::VectorXd& g, double radius) {
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(B);
  Eigen::VectorXd pb = -ldlt.solve(g);
  if (ldlt.info() == Eigen::Success && pb.allFinite() && pb.norm() <= radius) return pb;
  const double gBg = g.dot(B * g);
  if (!(gBg > 0.0)) return -radius * g / g.norm();
  const Eigen::VectorXd pu = -(g.squaredNorm() / gBg) * g;
  if (pu.norm() >= radius || !pb.allFinite()) return -radius * g / g.norm();
  const Eigen::VectorXd d = pb - pu;
  const double a = d.squaredNorm(), b = 2.0 * pu.dot(d), c = pu.squaredNorm() - radius * radius;
  const double tau = (-b + std::sqrt(std::max(b * b - 4.0 * a * c, 0.0))) / (2.0 * a);
  return pu + std::clamp(tau, 0.0, 1.0) * d;
}

inline OptimizationResult trust_region_bfgs_minimize(Objective& f, const Eigen::VectorXd& x0,
                                                     const OptimizerSettings& s = {}) {
  OptimizationResult r;
  r.x = x0;
  const auto e0 = f.value(x0);
  r.loss = e0.value;
  if (e0.failed) {
    r.termination = Termination::line_search_failure;
    r.trace.push_back({r.loss, std::numeric_limits<double>::infinity(), 0.0});
    return r;
  }
  r.gradient = f.gradient(x0);
  r.trace.push_back({r.loss, detail::inf_norm(r.gradient), 0.0});
  const auto n = x0.size();
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  bool first_update = true;
  double radius = s.initial_radius;
  int accepted = 0;

  for (int evals = 0;; ++evals) {
    r.iterations = accepted;
    if (detail::inf_norm(r.gradient) <= s.gradient_tolerance * (1.0 + std::abs(r.loss))) {
      r.termination = Termination::gradient_tol;
      return r;
    }
    if (accepted >= s.max_iterations || evals >= 20 * s.max_iterations) {
      r.termination = Termination::max_iter;
      return r;
    }
    if (radius <= s.step_tolerance * (1.0 + r.x.norm())) {
      r.termination = Termination::step_stall;
      return r;
    }
    const Eigen::VectorXd p = dogleg_step(B, r.gradient, radius);
    const double predicted = -(r.gradient.dot(p) + 0.5 * p.dot(B * p));
    const Eigen::VectorXd xt = r.x + p;
    const auto et = f.value(xt);
    double ratio = -std::numeric_limits<double>::infinity();
    if (!et.failed && predicted > 0.0) ratio = (r.loss - et.value) / predicted;
    r.trials.push_back({p.norm(), radius, ratio, et.failed, false});

    if (ratio < 0.25) {
      radius = 0.25 * p.norm();
    } else if (ratio > 0.75 && p.norm() >= 0.99 * radius) {
      radius = std::min(2.0 * radius, s.max_radius);
    }
    if (!(ratio > s.accept_ratio)) continue;

    r.trials.back().accepted = true;
    const Eigen::VectorXd gt = f.gradient(xt);
    const Eigen::VectorXd y = gt - r.gradient;
    r.x = xt;
    r.loss = et.value;
    r.gradient = gt;
    ++accepted;
    r.trace.push_back({r.loss, detail::inf_norm(r.gradient), p.norm()});
    if (p.norm() <= s.step_tolerance * (1.0 + r.x.norm())) {
      r.iterations = accepted;
      r.termination = Termination::step_stall;
      return r;
    }
    const double sy = p.dot(y);
    if (sy > 1e-12 * p.norm() * y.norm()) {
      if (first_update) {
        B *= y.squaredNorm() / sy;
        first_update = false;
      }
      const Eigen::VectorXd Bs = B * p;
      B += y * y.transpose() / sy - Bs * Bs.transpose() / p.dot(Bs);
    }
  }
}

inline OptimizationResult minimize(OptimizerKind kind, Objective& f, const Eigen::VectorXd& x0,
                                   const OptimizerSettings& s = {}) {
  return kind == OptimizerKind::bfgs ? bfgs_minimize(f, x0, s) : trust_region_bfgs_minimize(f, x0, s);
}

}  // namespace icecr
