#pragma once

// Dense BFGS with a strong-Wolfe line search, for small problems.

#include <Eigen/Core>

#include <functional>

namespace gazekit::bfgs {

/// Returns f(x) and writes the gradient into `grad` (already sized).
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct Options {
  int maxIterations = 200;
  /// Stop when the gradient infinity-norm drops below this.
  double gradTol = 1e-8;
  /// Also stop once an accepted step lowers f by less than
  /// ftolRel * (1 + |f|); such runs are reported as stalled.
  double ftolRel = 1e-12;
  double c1 = 1e-4;
  double c2 = 0.9;
  int maxLineSearch = 20;
  /// Called after each accepted step with (iteration, f).
  std::function<void(int, double)> onIteration;
};

struct Result {
  Eigen::VectorXd x;
  double f = 0.0;
  double f0 = 0.0;
  int iterations = 0;
  bool converged = false;
  bool lineSearchFailed = false;
  bool stalled = false;
};

/// Minimizes from x0. Only points that decrease f are accepted, so the
/// returned f never exceeds f(x0).
Result minimize(const Objective& fn, const Eigen::VectorXd& x0, const Options& opt = {});

}  // namespace gazekit::bfgs
