#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "odebench/dynamics.hpp"
#include "odebench/gp.hpp"
#include "odebench/observations.hpp"
#include "odebench/sampler.hpp"

namespace odebench {

/// Jointly sampled block: latent trajectory on the grid, ODE parameters and
/// log noise scales of the observed components.
struct MagiState {
  Mat x;          // M x D
  Vec theta;      // P (empty when theta is held fixed)
  Vec log_sigma;  // one entry per observed component, in component order
};

struct MagiProblem {
  ModelPtr model;
  DiscretizationGrid grid;
  ObservationSet observations;
  std::vector<GpKernelMats> kernels;  // one per component, all on grid.times
  Vec theta_lower, theta_upper;       // flat prior box (hard rejection)
  double log_sigma_lower = std::log(1e-6);
  double log_sigma_upper = std::log(1e3);
  std::optional<Vec> fixed_theta;     // hold theta at this value instead of sampling
  double prior_temperature = 1.0;     // divides the GP-prior and mechanistic terms

  int state_dim() const { return model->state_dim(); }
  Eigen::Index grid_size() const { return grid.size(); }
  std::vector<int> sigma_components() const { return observations.observed_components(); }
  int free_param_dim() const { return fixed_theta ? 0 : model->param_dim(); }
  /// Length of the flat coordinate vector (x column-major, theta, log sigma).
  Eigen::Index coordinate_dim() const;
  std::vector<std::string> coordinate_names() const;
  void validate() const;
};

/// Default flat prior boxes: [1e-6, 100] for positive parameters, [-100, 100] otherwise.
void set_default_theta_box(MagiProblem& problem);

Vec pack_state(const MagiProblem& problem, const MagiState& state);
MagiState unpack_state(const MagiProblem& problem, const Vec& q);

/// The three quadratic forms of the log posterior (each already multiplied by -1/2)
/// plus the -N_c log sigma_c normalisation.
struct MagiTerms {
  double gp_prior = 0.0;
  double observation = 0.0;
  double mechanistic = 0.0;
  double normalization = 0.0;
  double total() const { return gp_prior + observation + mechanistic + normalization; }
};

/// Evaluates the MAGI log posterior and its analytic gradient. Holds scratch
/// buffers, so one instance per thread.
class MagiPosterior {
 public:
  explicit MagiPosterior(const MagiProblem& problem);

  /// Log posterior at packed coordinates; -inf outside the prior box or when non-finite.
  double log_density(const Vec& q);
  /// Log posterior and gradient with respect to the packed coordinates.
  double log_density_grad(const Vec& q, Vec& grad);
  MagiTerms terms(const Vec& q);

 private:
  double evaluate(const Vec& q, Vec* grad, MagiTerms* terms);

  const MagiProblem& problem_;
  Mat f_;            // M x D rhs values
  std::vector<Mat> jac_x_, jac_theta_;
  Vec tmp_, resid_, weighted_;
};

double log_posterior(const MagiProblem& problem, const MagiState& state);
Vec log_posterior_grad(const MagiProblem& problem, const MagiState& state);

struct GradientMatchingOptions {
  int iterations = 3000;
  double learning_rate = 0.01;
  double curvature_weight = 1e-3;
};

struct MagiInit {
  Mat x;      // M x D
  Vec theta;  // P
  bool fallback = false;
  std::string warning;
};

/// Spline-smoothed observed components plus second-order gradient matching
/// (Adam) for missing components and theta. Grid points past the last
/// observation are filled by integrating forward from the smoothed boundary state.
MagiInit init_missing_components(const OdeModel& model, const DiscretizationGrid& grid,
                                 const ObservationSet& observations,
                                 const GradientMatchingOptions& options = {});

struct MagiConfig {
  int n_warmup = 3000;
  int n_samples = 3000;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  bool fourier_prior = false;
  double prior_temperature = 1.0;
  GradientMatchingOptions gradient_matching;
  GpFitOptions gp_fit;
  /// Subsample target for GP smoothing of missing-component trajectories.
  int max_missing_fit_points = 81;
};

/// Build kernels from GP smoothing fits (observed components on their data,
/// missing components on the initial trajectory) and return the problem.
struct PreparedProblem {
  MagiProblem problem;
  std::vector<GpFit> fits;
  MagiInit init;
  Vec sigma_init;  // per observed component
};

PreparedProblem prepare_problem(ModelPtr model, const DiscretizationGrid& grid,
                                const ObservationSet& observations, const MagiConfig& config);

struct PosteriorSamples {
  Mat draws;  // n_samples x coordinate_dim, unscaled coordinates
  std::vector<std::string> coordinate_names;
  Vec grid;
  int state_dim = 0;
  int param_dim = 0;
  std::vector<int> sigma_components;

  Mat mean_x;       // M x D posterior mean trajectory
  Vec mean_theta;
  Vec mean_sigma;
  Mat theta_interval;  // P x 2, equal-tailed 95%
  Mat x_lower, x_upper;  // M x D pointwise 95% bands

  double step_size = 0.0;
  int divergence_count = 0;
  double divergence_rate = 0.0;
  double mean_accept_stat = 0.0;
  double mean_tree_depth = 0.0;
  bool flagged = false;
  std::string warning;
  std::uint64_t seed = 0;
  std::vector<GpFit> fits;

  MagiState last_draw(const MagiProblem& problem) const;
};

struct RunOptions {
  int n_warmup = 3000;
  int n_samples = 3000;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  std::uint64_t seed = 1;
  bool dense_metric = true;  // full curvature transform; false = diagonal scaling only
};

/// NUTS over the full state. The sampler sees coordinates whitened by the
/// curvature of the log posterior at the initial point.
PosteriorSamples run_inference(const MagiProblem& problem, const MagiState& init,
                               const RunOptions& options);

/// Per-coordinate scale 1/sqrt(-d2 log p / dq_i^2) at q (finite differences of the gradient).
Vec curvature_scales(MagiPosterior& posterior, const Vec& q);
/// Linear map T with q = q0 + T z so that z has roughly unit curvature at q0
/// (eigenvalues of the negative Hessian clipped from below).
Mat curvature_transform(MagiPosterior& posterior, const Vec& q);

/// In-sample fit + forecast in one joint inference over an extended grid.
/// `grid` must already span the forecast horizon; hyperparameters come from
/// the in-sample observations only.
PosteriorSamples forecast_extended_grid(ModelPtr model, const DiscretizationGrid& grid,
                                        const ObservationSet& observations,
                                        const MagiConfig& config, std::uint64_t seed);

struct SequentialForecastOptions {
  double step = 1.0;
  int points_per_step = 40;
  MagiConfig config;
  std::uint64_t seed = 1;
};

struct SequentialForecast {
  PosteriorSamples final;
  std::vector<int> grid_sizes;  // after the initial fit and after each step
  int steps = 0;
  bool integration_fallback = false;
};

/// Sequential forecasting: starting from an in-sample fit on `grid`, extend by
/// `step` time units at a time until `horizon`.
SequentialForecast forecast_sequential(ModelPtr model, const DiscretizationGrid& grid,
                                       const ObservationSet& observations, double horizon,
                                       const SequentialForecastOptions& options);

/// Draws as raw little-endian doubles (row-major) plus a JSON sidecar.
void write_posterior(const std::string& stem, const PosteriorSamples& samples,
                     const std::string& config_hash);
/// Posterior-mean and interval summary CSV.
void write_posterior_summary(const std::string& path, const PosteriorSamples& samples,
                             const OdeModel& model);

}  // namespace odebench
