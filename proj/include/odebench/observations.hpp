#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "odebench/dynamics.hpp"

namespace odebench {

/// Noisy observations y(tau_i) = x(tau_i) + eps_i.
///
/// `values` is N x D; entries of components whose mask flag is false are NaN
/// and never read. Rows form a set: times must be distinct but need not be
/// sorted, and every consumer gives the same answer for any row order.
struct ObservationSet {
  Vec times;
  Mat values;
  std::vector<bool> mask;       // per component: observed?
  std::vector<double> noise_sd; // per component, as simulated (0 for unobserved)
  std::string noise_spec;       // human-readable convention
  std::uint64_t seed = 0;

  Eigen::Index size() const { return times.size(); }
  int dim() const { return static_cast<int>(mask.size()); }
  std::vector<int> observed_components() const;
  bool is_time_ordered() const;
  /// Copy with rows sorted by time.
  ObservationSet sorted_by_time() const;
  void validate() const;
};

/// Discretization set I: a strictly increasing grid containing every
/// observation time exactly.
struct DiscretizationGrid {
  Vec times;
  std::vector<int> obs_index;  // obs_index[i] = position of tau_i in times

  Eigen::Index size() const { return times.size(); }
};

/// Matches each observation time to a grid point (relative tolerance 1e-9)
/// and snaps the grid value to the observation time so membership is exact.
/// obs_index follows the order of `obs_times`, which may be unsorted.
DiscretizationGrid make_grid(const Vec& grid_times, const Vec& obs_times);

}  // namespace odebench
