#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "odebench/experiments.hpp"
#include "odebench/gp.hpp"
#include "odebench/magi.hpp"
#include "odebench/sampler.hpp"

namespace odebench::testsupport {

/// Central differences of a scalar function with steps scaled to |q_i|.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& q, double rel = 1e-6) {
  Vec g(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const double h = rel * std::max(1.0, std::abs(q[i]));
    Vec a = q, b = q;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b_i|).
inline double max_rel_error(const Vec& a, const Vec& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  return worst;
}

/// Classical RK4 with a fixed step; every `every` steps lands on an output row.
inline Mat fixed_rk4(const OdeModel& m, const Vec& x0, const Vec& th, double t1, double h, int every) {
  const int steps = static_cast<int>(std::lround(t1 / h));
  Mat out(steps / every + 1, x0.size());
  Vec x = x0;
  out.row(0) = x.transpose();
  for (int k = 0; k < steps; ++k) {
    const double t = k * h;
    const Vec k1 = m.rhs(x, th, t);
    const Vec k2 = m.rhs(x + 0.5 * h * k1, th, t + 0.5 * h);
    const Vec k3 = m.rhs(x + 0.5 * h * k2, th, t + 0.5 * h);
    const Vec k4 = m.rhs(x + h * k3, th, t + h);
    x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if ((k + 1) % every == 0) out.row((k + 1) / every) = x.transpose();
  }
  return out;
}

/// Finite differences of the kernel value: d/ds (1,0), d/dt (0,1) or d2/dsdt (1,1).
inline double fd_kernel(const MaternHyper& h, double s, double t, int ds, int dt, double step) {
  auto k = [&](double a, double b) { return matern_eval(h, a, b, 0, 0); };
  if (ds == 1 && dt == 0) return (k(s + step, t) - k(s - step, t)) / (2 * step);
  if (ds == 0 && dt == 1) return (k(s, t + step) - k(s, t - step)) / (2 * step);
  return (k(s + step, t + step) - k(s + step, t - step) - k(s - step, t + step) + k(s - step, t - step)) /
         (4 * step * step);
}

inline double rel(double a, double b, double floor) { return std::abs(a - b) / std::max(floor, std::abs(b)); }

/// Worst relative error of the assembled derivative matrices against kernel
/// finite differences on `grid`. Diagonal of K'' is skipped (FD is singular there).
inline double kernel_derivative_error(const MaternHyper& h, const Vec& grid) {
  const GpKernelMats km = build_kernel_mats(h, grid);
  const double scale = h.amplitude * h.amplitude;
  const double step = 1e-4 * h.lengthscale;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < grid.size(); ++i)
    for (Eigen::Index j = 0; j < grid.size(); ++j) {
      const double s = grid[i], t = grid[j];
      worst = std::max(worst, rel(km.dK(i, j), fd_kernel(h, s, t, 1, 0, step), 1e-2 * scale / h.lengthscale));
      worst = std::max(worst, rel(km.Kd(i, j), fd_kernel(h, s, t, 0, 1, step), 1e-2 * scale / h.lengthscale));
      if (i != j)
        worst = std::max(worst, rel(km.ddK(i, j), fd_kernel(h, s, t, 1, 1, step),
                                    1e-2 * scale / (h.lengthscale * h.lengthscale)));
    }
  return worst;
}

/// Zero-mean Gaussian log density with covariance `cov`.
inline LogDensityFn gaussian_target(const Mat& cov) {
  const Mat prec = cov.inverse();
  return [prec](const Vec& q, Vec& g) {
    g = -prec * q;
    return -0.5 * q.dot(prec * q);
  };
}

/// Monte Carlo standard error of a chain mean by batch means.
inline double mcse(const Vec& x) {
  const Eigen::Index n = x.size();
  const auto b = static_cast<Eigen::Index>(std::sqrt(static_cast<double>(n)));
  const Eigen::Index a = n / b;
  Vec means(a);
  for (Eigen::Index k = 0; k < a; ++k) means[k] = x.segment(k * b, b).mean();
  const double m = means.mean();
  const double var_batch = (means.array() - m).square().sum() / static_cast<double>(a - 1);
  return std::sqrt(var_batch / static_cast<double>(a));
}

/// Random correlation matrix (unit marginal variances).
inline Mat correlated_cov(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Mat B(dim, dim);
  for (int i = 0; i < dim * dim; ++i) B.data()[i] = n(rng);
  Mat cov = B * B.transpose() / dim + 0.2 * Mat::Identity(dim, dim);
  const Vec d = cov.diagonal().cwiseSqrt().cwiseInverse();
  return d.asDiagonal() * cov * d.asDiagonal();
}

/// MAGI problem with moment-matched hyperparameters instead of GP smoothing,
/// so gradient checks stay fast. Unobserved components borrow moments of the truth.
inline MagiProblem quick_problem(const RegimeSpec& regime, const ObservationSet& obs, const Vec& grid_times) {
  MagiProblem pr;
  pr.model = make_model(regime.model);
  pr.grid = make_grid(grid_times, obs.times);
  pr.observations = obs;
  set_default_theta_box(pr);
  const Trajectory truth = truth_trajectory(regime, grid_times);
  const double span = grid_times[grid_times.size() - 1] - grid_times[0];
  for (int c = 0; c < pr.state_dim(); ++c) {
    const Vec v = obs.mask[static_cast<size_t>(c)] ? Vec(obs.values.col(c)) : Vec(truth.values.col(c));
    const double mean = v.mean();
    const double sd = std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
    const double len = regime.model == "lorenz" ? 0.3 : span / 3.0;
    pr.kernels.push_back(build_kernel_mats({std::max(sd, 0.1), len, mean}, grid_times));
  }
  return pr;
}

/// Random state around the truth: smooth low-frequency perturbation of the
/// trajectory (white noise would put the GP prior at absurd magnitudes), theta
/// within +-20%, sigma on the noise scale.
inline Vec random_state(const MagiProblem& pr, const RegimeSpec& regime, std::mt19937_64& rng) {
  const Trajectory truth = truth_trajectory(regime, pr.grid.times);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.8, 1.2), s(0.05, 0.3), phase(0.0, 2.0 * M_PI);
  const Vec& t = pr.grid.times;
  const double t0 = t[0], span = t[t.size() - 1] - t[0];
  MagiState st;
  st.x = truth.values;
  for (int c = 0; c < pr.state_dim(); ++c) {
    const double sd = std::sqrt((truth.values.col(c).array() - truth.values.col(c).mean()).square().mean());
    for (int k = 1; k <= 4; ++k) {
      const double amp = 0.05 * sd * n(rng) / k, ph = phase(rng);
      for (Eigen::Index j = 0; j < st.x.rows(); ++j) st.x(j, c) += amp * std::sin(k * M_PI * (t[j] - t0) / span + ph);
    }
  }
  if (!pr.fixed_theta) {
    st.theta = regime.theta;
    for (Eigen::Index i = 0; i < st.theta.size(); ++i) st.theta[i] *= u(rng);
  }
  const auto sig = pr.sigma_components();
  st.log_sigma.resize(static_cast<Eigen::Index>(sig.size()));
  for (size_t k = 0; k < sig.size(); ++k) st.log_sigma[static_cast<Eigen::Index>(k)] = std::log(s(rng));
  return pack_state(pr, st);
}

}  // namespace odebench::testsupport
