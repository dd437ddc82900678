#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "odebench/dynamics.hpp"
#include "odebench/integrate.hpp"
#include "odebench/magi.hpp"
#include "odebench/observations.hpp"
#include "odebench/pinn.hpp"

namespace odebench {

enum class NoiseKind {
  LogAdditive,     // Gaussian with fixed sd on log-scale components
  RelativeToSd,    // Gaussian with sd = level * component sd of the truth at observation times
};

enum class ForecastProtocol { None, ExtendedGrid, Sequential };

struct RegimeSpec {
  std::string name;
  std::string model;
  Vec theta;
  Vec x0;  // state at obs_t0
  double obs_t0 = 0.0, obs_t1 = 0.0;
  int n_obs = 0;
  NoiseKind noise_kind = NoiseKind::LogAdditive;
  double noise_level = 0.0;
  std::vector<bool> mask;
  int grid_points = 0;  // discretization points on [obs_t0, obs_t1]
  ForecastProtocol forecast = ForecastProtocol::None;
  double forecast_t1 = 0.0;
  int forecast_grid_points = 0;  // additional points on (obs_t1, forecast_t1]
  int forecast_eval_points = 0;  // evaluation points on [obs_t1, forecast_t1]; 0 = forecast grid
  bool fourier_prior = false;
  bool log_space_metrics = false;  // state components are logs of the physical quantities
  int replicates = 100;

  Vec observation_times() const { return uniform_grid(obs_t0, obs_t1, n_obs); }
  Vec in_sample_grid() const { return uniform_grid(obs_t0, obs_t1, grid_points); }
  /// In-sample grid extended through the forecast window (same spacing).
  Vec extended_grid() const;
  /// Times at which forecast error is evaluated.
  Vec forecast_eval_times() const;
  void validate() const;
  std::string noise_description() const;
};

std::vector<RegimeSpec> builtin_regimes(int replicates = 100);
/// Throws ConfigError listing the known names when `name` is unknown.
RegimeSpec find_regime(const std::string& name, int replicates = 100);
std::vector<std::string> regime_names();

/// Counter-based seed split: distinct (replicate, tag) pairs give independent streams.
std::uint64_t split_seed(std::uint64_t base, std::uint64_t replicate, const std::string& tag);
std::uint64_t dataset_seed(std::uint64_t base, int replicate);
/// 64-bit FNV-1a of a string, printed as hex by config_hash.
std::uint64_t fnv1a(const std::string& s);
std::string config_hash(const std::string& canonical);

Trajectory truth_trajectory(const RegimeSpec& regime, const Vec& times);
ObservationSet simulate_dataset(const RegimeSpec& regime, std::uint64_t seed);

void write_dataset_csv(std::ostream& os, const ObservationSet& obs, const OdeModel& model);
/// CSV plus `<path>.json` sidecar (regime, seed, noise convention).
void write_dataset(const std::string& path, const ObservationSet& obs, const RegimeSpec& regime);
ObservationSet read_dataset(const std::string& path, const RegimeSpec& regime);

/// Per-component RMSE over eval_times; both trajectories must contain every eval time.
Vec compute_rmse(const Trajectory& estimate, const Trajectory& truth, const Vec& eval_times);

struct QuantitiesOfInterest {
  double r0 = 0.0;
  double peak_time = 0.0;
  double peak_intensity = 0.0;
  bool peak_at_boundary = false;
};

/// SEIR only: R0 = beta/gamma and argmax/max of I (linear scale) over a
/// trajectory that must cover [0, horizon_end].
QuantitiesOfInterest quantities_of_interest(const OdeModel& model, const Vec& theta_hat,
                                            const Trajectory& forecast, double horizon_end);

/// Per component sqrt(mean_j (xdot_j - f(x_j))^2).
Vec mechanistic_fidelity(const OdeModel& model, const Vec& theta, const Vec& times, const Mat& x,
                         const Mat& xdot);
/// GP conditional-mean derivative m (x - mean) per component.
Mat magi_derivative(const std::vector<GpKernelMats>& kernels, const Mat& x);
/// Network time derivative at each time.
Mat pinn_derivative(const MlpNet& net, const TimeNormalization& norm, const Vec& times);

/// Fraction of intervals (P x 2 each) containing the truth, per parameter.
Vec coverage_report(const std::vector<Mat>& intervals, const Vec& truth);

// ------------------------------------------------------------------ studies

struct MethodSpec {
  std::string method;  // "magi" | "pinn"
  MagiConfig magi;
  PinnConfig pinn;

  double lambda() const { return method == "pinn" ? pinn.lambda : 0.0; }
  /// Stable tag used for seeding and file names, e.g. "magi" or "pinn-l10".
  std::string tag() const;
  /// Canonical description of every setting that affects results.
  std::string canonical() const;
};

struct MetricRow {
  std::string regime, method;
  double lambda = 0.0;
  int replicate = 0;
  std::uint64_t seed = 0;
  std::string target, metric;
  double value = 0.0;
  std::string flag;
};

void write_results_header(std::ostream& os);
void write_result_row(std::ostream& os, const MetricRow& row);
std::vector<MetricRow> read_results_csv(const std::string& path);

struct StudyConfig {
  RegimeSpec regime;
  std::vector<MethodSpec> methods;
  int replicate_begin = 0;
  int replicate_end = 1;  // exclusive
  std::uint64_t seed_base = 1;
  std::string out_dir;
  bool forecast = false;
  bool save_draws = false;
  int jobs = 1;
  std::string scale_note;  // appended to every row's flag (e.g. "desk-scale")
};

struct RunOutcome {
  std::vector<MetricRow> rows;
  bool failed = false;
  std::string error;
  double wall_seconds = 0.0;
  // Populated for in-process consumers (acceptance checks, bindings).
  Vec theta_hat;
  Mat theta_interval;
  Trajectory estimate;   // on the method's grid
  Mat fitted_at_obs;     // estimate at observation times
};

/// Runs one (replicate, method) and returns its metric rows. Writes artifacts
/// under `artifact_dir` when non-empty.
RunOutcome run_single(const RegimeSpec& regime, const MethodSpec& method, const ObservationSet& data,
                      int replicate, std::uint64_t seed, bool forecast,
                      const std::string& artifact_dir = "", bool save_draws = false);

struct StudyResult {
  std::vector<MetricRow> rows;  // canonical order: replicate, then method
  int runs = 0;
  int skipped = 0;  // already complete on disk
  int failures = 0;
};

/// simulate -> infer -> metrics for each (replicate, method). Each run's rows
/// land in runs/<key>.csv; results.csv is rebuilt from those in canonical
/// order, so resuming recomputes nothing and parallel runs stay deterministic.
StudyResult run_study(const StudyConfig& config);

}  // namespace odebench
