#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "odebench/dynamics.hpp"

namespace odebench {

/// Time-indexed states: row k of `values` is the state at `times[k]`.
struct Trajectory {
  Vec times;
  Mat values;
  std::string model_name;
  std::vector<std::string> component_names;

  Eigen::Index size() const { return times.size(); }
  void validate() const;
};

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double last_time)
      : std::runtime_error(what), last_time_(last_time) {}
  double last_time() const noexcept { return last_time_; }

 private:
  double last_time_;
};

struct Rk45Options {
  double rel_tol = 1e-8;
  double abs_tol = 1e-10;
  long max_steps = 5'000'000;
};

/// Adaptive Dormand-Prince 5(4) with dense output at `eval_times`.
/// eval_times[0] is the initial time of `x0`.
Trajectory integrate_rk45(const OdeModel& model, const Vec& x0, const Vec& theta,
                          const Vec& eval_times, const Rk45Options& options = {});

struct PeakResult {
  double time = 0.0;
  double value = 0.0;
  bool at_boundary = false;
};

/// Argmax / max of component `component` (natural scale, see OdeModel::to_natural)
/// over the uniform grid t0, t0 + step, ... <= t1.
PeakResult solve_peak(const OdeModel& model, const Vec& x0, const Vec& theta, double t0,
                      double t1, double grid_step, int component,
                      const Rk45Options& options = {});

/// Argmax over an arbitrary trajectory column, natural scale.
PeakResult trajectory_peak(const OdeModel& model, const Trajectory& traj, int component);

/// Uniform grid of `count` points from t0 to t1 inclusive, built by integer
/// subdivision so that nested grids share points exactly.
Vec uniform_grid(double t0, double t1, int count);

/// CSV with header `t,<components>` and 17 significant digits.
void write_trajectory_csv(std::ostream& out, const Trajectory& traj);
void write_trajectory_csv(const std::string& path, const Trajectory& traj);
Trajectory read_trajectory_csv(const std::string& path);

}  // namespace odebench
