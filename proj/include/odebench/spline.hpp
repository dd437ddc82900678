#pragma once

#include "odebench/dynamics.hpp"

namespace odebench {

/// Natural cubic smoothing spline (Reinsch form) with the smoothing
/// parameter chosen by generalized cross-validation.
class SmoothingSpline {
 public:
  /// Fits with GCV-selected smoothing.
  SmoothingSpline(const Vec& knots, const Vec& values);
  /// Fits with a fixed smoothing parameter alpha >= 0 (0 interpolates).
  SmoothingSpline(const Vec& knots, const Vec& values, double alpha);

  double operator()(double t) const;
  Vec operator()(const Vec& t) const;

  double alpha() const { return alpha_; }
  double gcv_score() const { return gcv_; }
  const Vec& fitted() const { return g_; }

  /// GCV criterion n * RSS / (n - tr A)^2 at a given alpha.
  static double gcv(const Vec& knots, const Vec& values, double alpha);

 private:
  void fit(double alpha);

  Vec t_, y_;
  Vec g_;      // fitted values at knots
  Vec gamma_;  // second derivatives at knots (zero at the ends)
  double alpha_ = 0.0;
  double gcv_ = 0.0;
};

}  // namespace odebench
