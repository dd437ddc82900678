#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "odebench/dynamics.hpp"
#include "odebench/observations.hpp"

namespace odebench {

/// Fully connected tanh network mapping scalar time to a D-vector.
/// W[l] is widths[l+1] x widths[l]; the output layer is linear.
struct MlpNet {
  std::vector<int> widths;
  std::vector<Mat> W;
  std::vector<Vec> b;

  int layers() const { return static_cast<int>(W.size()); }
  Eigen::Index parameter_count() const;
  Vec flatten() const;  // per layer: W row-major, then b
  void unflatten(const Vec& p);
  void validate() const;

  static MlpNet zeros(const std::vector<int>& widths);
  /// Glorot-uniform weights, zero biases.
  static MlpNet glorot(const std::vector<int>& widths, std::uint64_t seed);
};

/// Affine map of [t_min, t_max] onto [-1, 1].
struct TimeNormalization {
  double t_min = -1.0;
  double t_max = 1.0;
  double scale() const { return 2.0 / (t_max - t_min); }
  double operator()(double t) const { return (t - t_min) * scale() - 1.0; }
};

struct PinnConfig {
  double lambda = 10.0;
  int epochs = 60000;
  double learning_rate = 0.01;
  std::vector<int> hidden = {20, 20, 20};
  std::optional<Vec> theta_init;  // drawn from U[0.5, 1.5] when absent
  std::uint64_t seed = 1;
  int log_every = 100;

  void validate() const;
};

/// Network value and exact time derivative at t.
std::pair<Vec, Vec> forward_with_time_derivative(const MlpNet& net, const TimeNormalization& norm,
                                                 double t);

/// Network values at several times, one row per time.
Mat pinn_predict(const MlpNet& net, const TimeNormalization& norm, const Vec& times);

struct PinnLoss {
  double total = 0.0;
  double physics = 0.0;
  double data = 0.0;
};

/// Physics residual on `grid_times` plus lambda-weighted data misfit on the
/// observed components. Optional gradients: network parameters (flatten()
/// order) and theta in natural units.
PinnLoss pinn_loss(const MlpNet& net, const OdeModel& model, const Vec& theta,
                   const ObservationSet& data, const Vec& grid_times, double lambda,
                   const TimeNormalization& norm, Vec* grad_net = nullptr,
                   Vec* grad_theta = nullptr);

struct LossRecord {
  int epoch;
  double physics, data, total;
};

struct PinnResult {
  MlpNet net;
  TimeNormalization norm;
  Vec theta;
  Vec theta_init;
  std::vector<LossRecord> history;
  int nonfinite_steps = 0;
  bool unstable = false;

  Mat predict(const Vec& times) const { return pinn_predict(net, norm, times); }
};

/// Full-batch Adam over network weights and theta (log scale for positive
/// parameters). Time is normalised over the grid span.
PinnResult train_pinn(const PinnConfig& config, const OdeModel& model, const ObservationSet& data,
                      const Vec& grid_times);

void write_network_json(std::ostream& os, const MlpNet& net, const TimeNormalization& norm);
MlpNet read_network_json(std::istream& is, TimeNormalization* norm = nullptr);
void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& history);

}  // namespace odebench
