#include "gazekit/bfgs.hpp"

#include <cmath>
#include <optional>

#include "gazekit/errors.hpp"

namespace gazekit::bfgs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Point {
  double alpha = 0.0;
  double f = 0.0;
  double slope = 0.0;
  VectorXd x, g;
};

struct LineSearch {
  const Objective& fn;
  const Options& opt;
  const VectorXd& x0;
  const VectorXd& dir;
  double f0, slope0;

  Point eval(double alpha) const {
    Point p;
    p.alpha = alpha;
    p.x = x0 + alpha * dir;
    p.g.resize(x0.size());
    p.f = fn(p.x, p.g);
    p.slope = p.g.dot(dir);
    return p;
  }

  bool armijo(const Point& p) const { return p.f <= f0 + opt.c1 * p.alpha * slope0; }
  bool curvature(const Point& p) const { return std::abs(p.slope) <= -opt.c2 * slope0; }

  static double cubic_min(const Point& lo, const Point& hi) {
    const double d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (lo.alpha - hi.alpha);
    const double disc = d1 * d1 - lo.slope * hi.slope;
    if (disc >= 0.0) {
      const double d2 = std::copysign(std::sqrt(disc), hi.alpha - lo.alpha);
      const double t = hi.alpha - (hi.alpha - lo.alpha) * (hi.slope + d2 - d1) /
                                      (hi.slope - lo.slope + 2.0 * d2);
      const double a = std::min(lo.alpha, hi.alpha), b = std::max(lo.alpha, hi.alpha);
      const double margin = 0.1 * (b - a);
      if (std::isfinite(t) && t > a + margin && t < b - margin) return t;
    }
    return 0.5 * (lo.alpha + hi.alpha);
  }

  /// Best Armijo point found; `wolfe` tells whether curvature also holds.
  std::optional<Point> run(bool& wolfe) const {
    wolfe = false;
    Point prev;
    prev.alpha = 0.0;
    prev.f = f0;
    prev.slope = slope0;
    std::optional<Point> best;
    double alpha = 1.0;
    int evals = 0;
    auto keep = [&](const Point& p) {
      if (std::isfinite(p.f) && armijo(p) && (!best || p.f < best->f)) best = p;
    };
    auto zoom = [&](Point lo, Point hi) -> std::optional<Point> {
      while (evals < opt.maxLineSearch) {
        const Point p = eval(cubic_min(lo, hi));
        ++evals;
        keep(p);
        if (!std::isfinite(p.f) || !armijo(p) || p.f >= lo.f) {
          hi = p;
        } else {
          if (curvature(p)) {
            wolfe = true;
            return p;
          }
          if (p.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
          lo = p;
        }
        if (std::abs(hi.alpha - lo.alpha) <= 1e-12 * std::max(lo.alpha, hi.alpha)) break;
      }
      return best;
    };
    while (evals < opt.maxLineSearch) {
      const Point p = eval(alpha);
      ++evals;
      keep(p);
      if (!std::isfinite(p.f) || !armijo(p) || (evals > 1 && p.f >= prev.f)) {
        return zoom(prev, p);
      }
      if (curvature(p)) {
        wolfe = true;
        return p;
      }
      if (p.slope >= 0.0) return zoom(p, prev);
      prev = p;
      alpha *= 2.0;
    }
    return best;
  }
};

}  // namespace

Result minimize(const Objective& fn, const VectorXd& x0, const Options& opt) {
  const long n = x0.size();
  Result r;
  r.x = x0;
  VectorXd g(n);
  r.f = fn(r.x, g);
  r.f0 = r.f;
  if (!std::isfinite(r.f) || !g.allFinite()) {
    throw NumericalError("non-finite objective at the initial point");
  }
  if (n == 0) {
    r.converged = true;
    return r;
  }
  MatrixXd H = MatrixXd::Identity(n, n);
  bool freshH = true;
  while (r.iterations < opt.maxIterations) {
    if (g.lpNorm<Eigen::Infinity>() < opt.gradTol) {
      r.converged = true;
      return r;
    }
    VectorXd dir = -H * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      H.setIdentity();
      freshH = true;
      dir = -g;
      slope = -g.squaredNorm();
    }
    if (freshH) {
      // Scale the first step to a modest length.
      const double len = dir.norm();
      if (len > 1.0) {
        dir /= len;
        slope /= len;
      }
    }
    LineSearch ls{fn, opt, r.x, dir, r.f, slope};
    bool wolfe = false;
    const auto p = ls.run(wolfe);
    if (!p || !(p->f < r.f)) {
      if (!freshH) {
        H.setIdentity();
        freshH = true;
        continue;
      }
      r.lineSearchFailed = true;
      return r;
    }
    ++r.iterations;
    const double decrease = r.f - p->f;
    const VectorXd s = p->x - r.x;
    const VectorXd y = p->g - g;
    r.x = p->x;
    r.f = p->f;
    g = p->g;
    if (opt.onIteration) opt.onIteration(r.iterations, r.f);
    if (decrease <= opt.ftolRel * (1.0 + std::abs(r.f))) {
      r.converged = g.lpNorm<Eigen::Infinity>() < opt.gradTol;
      r.stalled = !r.converged;
      return r;
    }
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
      if (freshH) H *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const MatrixXd I = MatrixXd::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) +
          rho * s * s.transpose();
      freshH = false;
    }
  }
  r.converged = g.lpNorm<Eigen::Infinity>() < opt.gradTol;
  return r;
}

}  // namespace gazekit::bfgs
