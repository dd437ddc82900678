#include "odebench/observations.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace odebench {

std::vector<int> ObservationSet::observed_components() const {
  std::vector<int> out;
  for (int c = 0; c < dim(); ++c)
    if (mask[static_cast<size_t>(c)]) out.push_back(c);
  return out;
}

bool ObservationSet::is_time_ordered() const {
  for (Eigen::Index i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) return false;
  return true;
}

ObservationSet ObservationSet::sorted_by_time() const {
  std::vector<Eigen::Index> order(static_cast<size_t>(times.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return times[a] < times[b]; });
  ObservationSet out = *this;
  for (size_t k = 0; k < order.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    out.times[i] = times[order[k]];
    out.values.row(i) = values.row(order[k]);
  }
  return out;
}

void ObservationSet::validate() const {
  if (values.rows() != times.size()) throw std::invalid_argument("observation rows != times");
  if (values.cols() != static_cast<Eigen::Index>(mask.size()))
    throw std::invalid_argument("observation columns != mask size");
  if (!times.allFinite()) throw std::invalid_argument("observation times must be finite");
  std::vector<double> t(times.data(), times.data() + times.size());
  std::sort(t.begin(), t.end());
  if (std::adjacent_find(t.begin(), t.end()) != t.end())
    throw std::invalid_argument("observation times must be distinct");
  for (int c = 0; c < dim(); ++c) {
    if (!mask[static_cast<size_t>(c)]) continue;
    if (!values.col(c).allFinite())
      throw std::invalid_argument("observed component contains non-finite values");
  }
}

DiscretizationGrid make_grid(const Vec& grid_times, const Vec& obs_times) {
  DiscretizationGrid g;
  g.times = grid_times;
  for (Eigen::Index i = 1; i < g.times.size(); ++i)
    if (!(g.times[i] > g.times[i - 1])) throw std::invalid_argument("grid must increase");
  g.obs_index.reserve(static_cast<size_t>(obs_times.size()));
  const double* first = g.times.data();
  const double* last = first + g.times.size();
  for (Eigen::Index i = 0; i < obs_times.size(); ++i) {
    const double tau = obs_times[i];
    const double tol = 1e-9 * std::max(1.0, std::abs(tau));
    const double* it = std::lower_bound(first, last, tau - tol);
    if (it == last || std::abs(*it - tau) > tol) {
      std::ostringstream msg;
      msg << "observation time " << tau << " is not a grid point";
      throw std::invalid_argument(msg.str());
    }
    const auto j = static_cast<Eigen::Index>(it - first);
    g.times[j] = tau;
    g.obs_index.push_back(static_cast<int>(j));
  }
  return g;
}

}  // namespace odebench
