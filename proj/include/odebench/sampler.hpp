#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>

#include "odebench/dynamics.hpp"

namespace odebench {

/// Log density and its gradient. Must return -inf (or any non-finite value)
/// outside the support; the gradient is then ignored.
using LogDensityFn = std::function<double(const Vec& q, Vec& grad)>;

struct NutsConfig {
  double target_accept = 0.8;
  int max_tree_depth = 10;
  int n_warmup = 3000;
  int n_samples = 3000;
  std::uint64_t seed = 1;
  double max_delta_h = 1000.0;
  double initial_step_size = 1.0;  // starting point of the step-size heuristic

  void validate() const;
};

struct ChainResult {
  Mat draws;  // n_samples x dim
  Vec log_density;
  double step_size = 0.0;
  int divergence_count = 0;           // post-warmup
  int warmup_divergence_count = 0;
  double mean_accept_stat = 0.0;      // post-warmup
  Eigen::VectorXi tree_depths;        // post-warmup
  Eigen::VectorXi leapfrog_counts;    // post-warmup
  Vec energy_error;                   // |H(final) - H(initial)| per post-warmup transition
};

class SamplerInitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Nesterov dual averaging of log step size.
class DualAveraging {
 public:
  DualAveraging(double initial_step, double target_accept, double gamma = 0.05, double t0 = 10.0,
                double kappa = 0.75);

  /// Feeds one acceptance statistic; returns the step size for the next iteration.
  double update(double accept_stat);
  double step_size() const { return std::exp(log_step_); }
  double final_step_size() const { return std::exp(log_step_bar_); }
  int count() const { return count_; }

 private:
  double mu_;
  double target_;
  double gamma_, t0_, kappa_;
  int count_ = 0;
  double s_bar_ = 0.0;
  double log_step_ = 0.0;
  double log_step_bar_ = 0.0;
};

/// Multinomial NUTS with identity mass matrix; step size adapted by dual
/// averaging during warmup, then frozen.
ChainResult nuts_sample(const LogDensityFn& logdensity, const Vec& init, const NutsConfig& config);

}  // namespace odebench
