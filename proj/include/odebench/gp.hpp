#pragma once

#include <string>

#include <Eigen/Cholesky>

#include "odebench/dynamics.hpp"

namespace odebench {

/// Smoothness of the Matern kernel used throughout. Just above 2 so sample
/// paths are twice differentiable.
inline constexpr double kMaternNu = 2.01;

class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaternHyper {
  double amplitude = 1.0;    // output scale; k(t, t) = amplitude^2
  double lengthscale = 1.0;  // time units
  double mean = 0.0;         // constant prior mean

  static constexpr double nu = kMaternNu;
  void validate() const;
};

/// d^a/ds^a d^b/dt^b k(s, t) for a, b in {0, 1}.
double matern_eval(const MaternHyper& hyper, double s, double t, int ds, int dt);

/// d k(s, t) / d lengthscale.
double matern_dlengthscale(const MaternHyper& hyper, double s, double t);

/// Kernel bundle for one component on a fixed grid.
///
/// dK(i, j) = d/ds k(s_i, t_j), Kd(i, j) = d/dt k(s_i, t_j), ddK = d2/ds dt.
/// m = dK * K^-1 predicts the GP derivative from values; C is the conditional
/// covariance of the derivative given the values (computed with 1e-6 added to
/// the diagonal of ddK).
struct GpKernelMats {
  Vec grid;
  MaternHyper hyper;
  Mat K, dK, Kd, ddK, m, C;
  Mat K_inv, C_inv;
  Eigen::LLT<Mat> K_chol, C_chol;
  double k_jitter = 0.0;
  double log_det_K = 0.0;
  double log_det_C = 0.0;
};

inline constexpr double kDerivativeJitter = 1e-6;

GpKernelMats build_kernel_mats(const MaternHyper& hyper, const Vec& grid);

/// v^T A^-1 v through an existing Cholesky factor of A.
double quad_form_inv(const Eigen::LLT<Mat>& chol, const Vec& v);

struct GpFitOptions {
  int iterations = 1500;
  double learning_rate = 0.01;
  double convergence_tol = 1e-8;
  int convergence_window = 50;
};

struct GpFit {
  MaternHyper hyper;
  double noise_sd = 0.0;
  bool fourier_prior = false;
  bool degenerate = false;  // flat data: minimum-amplitude fit returned
  int iterations = 0;
  double objective = 0.0;
};

/// Half of the dominant period of the linearly interpolated series, from the
/// largest non-DC periodogram ordinate.
double dominant_half_period(const Vec& times, const Vec& values);

/// Maximum marginal likelihood fit of (amplitude, lengthscale, mean, noise_sd)
/// by projected Adam on log-scale parameters.
GpFit gp_smooth_fit(const Vec& times, const Vec& values, bool use_fourier_prior,
                    const GpFitOptions& options = {});

/// Negative log marginal likelihood (plus the Fourier penalty when enabled)
/// at fixed hyperparameters; exposed for tests.
double gp_fit_objective(const Vec& times, const Vec& values, const MaternHyper& hyper,
                        double noise_sd, double fourier_half_period);

std::string gp_fit_to_json(const std::string& component, const GpFit& fit);
GpFit gp_fit_from_json(const std::string& text, std::string* component = nullptr);

}  // namespace odebench
