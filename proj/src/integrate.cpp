#include "odebench/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace odebench {

void Trajectory::validate() const {
  if (values.rows() != times.size()) {
    throw std::invalid_argument("trajectory row count does not match time count");
  }
  for (Eigen::Index k = 1; k < times.size(); ++k) {
    if (!(times[k] > times[k - 1])) throw std::invalid_argument("trajectory times must increase");
  }
  if (!values.allFinite()) throw std::invalid_argument("trajectory contains non-finite values");
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
// Continuous extension of order 4.
constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                 d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                 d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;

double error_norm(const Vec& err, const Vec& y0, const Vec& y1, const Rk45Options& opt) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double sc = opt.abs_tol + opt.rel_tol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double r = err[i] / sc;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

double initial_step(const OdeModel& model, const Vec& x0, const Vec& theta, double t0,
                    const Vec& f0, double span, const Rk45Options& opt) {
  Vec sc = (opt.abs_tol + opt.rel_tol * x0.array().abs()).matrix();
  const double d0 = std::sqrt((x0.array() / sc.array()).square().mean());
  const double d1n = std::sqrt((f0.array() / sc.array()).square().mean());
  double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
  h0 = std::min(h0, span);
  Vec x1 = x0 + h0 * f0;
  Vec f1 = model.rhs(x1, theta, t0 + h0);
  const double d2 = std::sqrt((((f1 - f0).array()) / sc.array()).square().mean()) / h0;
  const double dmax = std::max(d1n, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 1.0 / 5.0);
  double h = std::min(100.0 * h0, h1);
  if (!std::isfinite(h) || h <= 0.0) h = 1e-6;
  return std::min(h, span);
}

}  // namespace

Trajectory integrate_rk45(const OdeModel& model, const Vec& x0, const Vec& theta,
                          const Vec& eval_times, const Rk45Options& opt) {
  const int dim = model.state_dim();
  if (x0.size() != dim) throw std::invalid_argument("initial state has wrong dimension");
  if (theta.size() != model.param_dim())
    throw std::invalid_argument("parameter vector has wrong dimension");
  if (eval_times.size() < 1) throw std::invalid_argument("eval_times must be non-empty");
  for (Eigen::Index k = 1; k < eval_times.size(); ++k) {
    if (!(eval_times[k] > eval_times[k - 1]))
      throw std::invalid_argument("eval_times must be strictly increasing");
  }
  if (!(opt.rel_tol > 0.0 && opt.abs_tol > 0.0))
    throw std::invalid_argument("tolerances must be positive");

  Trajectory traj;
  traj.times = eval_times;
  traj.values.resize(eval_times.size(), dim);
  traj.model_name = model.name();
  traj.component_names = model.component_names();
  traj.values.row(0) = x0.transpose();
  if (!x0.allFinite()) throw IntegrationError("non-finite initial state", eval_times[0]);
  if (eval_times.size() == 1) return traj;

  const double t_end = eval_times[eval_times.size() - 1];
  double t = eval_times[0];
  Vec y = x0;
  Vec k1(dim), k2(dim), k3(dim), k4(dim), k5(dim), k6(dim), k7(dim), ytmp(dim), ynew(dim),
      err(dim);
  model.eval_rhs(y, theta, t, k1);
  double h = initial_step(model, y, theta, t, k1, t_end - t, opt);
  Eigen::Index next = 1;
  long steps = 0;

  while (next < eval_times.size()) {
    if (++steps > opt.max_steps) throw IntegrationError("too many integration steps", t);
    const double min_step = 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t));
    if (h < min_step) throw IntegrationError("integration step size underflow", t);
    bool last = false;
    if (t + h >= t_end) {
      h = t_end - t;
      last = true;
    }

    ytmp = y + h * (a21 * k1);
    model.eval_rhs(ytmp, theta, t + c2 * h, k2);
    ytmp = y + h * (a31 * k1 + a32 * k2);
    model.eval_rhs(ytmp, theta, t + c3 * h, k3);
    ytmp = y + h * (a41 * k1 + a42 * k2 + a43 * k3);
    model.eval_rhs(ytmp, theta, t + c4 * h, k4);
    ytmp = y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    model.eval_rhs(ytmp, theta, t + c5 * h, k5);
    ytmp = y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    model.eval_rhs(ytmp, theta, t + h, k6);
    ynew = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    model.eval_rhs(ynew, theta, t + h, k7);
    err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    const double en = error_norm(err, y, ynew, opt);
    if (!std::isfinite(en) || !ynew.allFinite()) {
      h *= 0.2;
      continue;
    }
    if (en > 1.0) {
      h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
      continue;
    }

    // Accepted: dense output for every eval time inside (t, t + h].
    const double t_new = last ? t_end : t + h;
    if (next < eval_times.size() && eval_times[next] <= t_new) {
      const Vec ydiff = ynew - y;
      const Vec bspl = h * k1 - ydiff;
      const Vec rc4 = ydiff - h * k7 - bspl;
      const Vec rc5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
      while (next < eval_times.size() && eval_times[next] <= t_new) {
        if (eval_times[next] == t_new) {
          traj.values.row(next) = ynew.transpose();
        } else {
          const double s = (eval_times[next] - t) / h;
          const double s1 = 1.0 - s;
          traj.values.row(next) =
              (y + s * (ydiff + s1 * (bspl + s * (rc4 + s1 * rc5)))).transpose();
        }
        ++next;
      }
    }

    t = t_new;
    y = ynew;
    k1 = k7;
    const double fac = en == 0.0 ? 5.0 : std::min(5.0, std::max(0.2, 0.9 * std::pow(en, -0.2)));
    if (!last) h *= fac;
  }
  return traj;
}

Vec uniform_grid(double t0, double t1, int count) {
  if (count < 2) throw std::invalid_argument("uniform grid needs at least 2 points");
  if (!(t1 > t0)) throw std::invalid_argument("uniform grid needs t1 > t0");
  Vec g(count);
  const double span = t1 - t0;
  for (int k = 0; k < count; ++k) g[k] = t0 + (span * k) / (count - 1);
  g[count - 1] = t1;
  return g;
}

PeakResult trajectory_peak(const OdeModel& model, const Trajectory& traj, int component) {
  if (traj.size() == 0) throw std::invalid_argument("empty trajectory");
  PeakResult best;
  Eigen::Index best_k = 0;
  best.value = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < traj.size(); ++k) {
    const double v = model.to_natural(component, traj.values(k, component));
    if (v > best.value) {
      best.value = v;
      best_k = k;
    }
  }
  best.time = traj.times[best_k];
  best.at_boundary = best_k == 0 || best_k == traj.size() - 1;
  return best;
}

PeakResult solve_peak(const OdeModel& model, const Vec& x0, const Vec& theta, double t0,
                      double t1, double grid_step, int component, const Rk45Options& options) {
  if (!(grid_step > 0.0)) throw std::invalid_argument("grid_step must be positive");
  const int intervals = static_cast<int>(std::floor((t1 - t0) / grid_step + 1e-9));
  if (intervals < 1) throw std::invalid_argument("horizon shorter than one grid step");
  Vec grid(intervals + 1);
  for (int k = 0; k <= intervals; ++k) grid[k] = t0 + grid_step * k;
  const Trajectory traj = integrate_rk45(model, x0, theta, grid, options);
  return trajectory_peak(model, traj, component);
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  out << "t";
  for (const auto& name : traj.component_names) out << ',' << name;
  out << '\n';
  out << std::setprecision(17);
  for (Eigen::Index k = 0; k < traj.size(); ++k) {
    out << traj.times[k];
    for (Eigen::Index c = 0; c < traj.values.cols(); ++c) out << ',' << traj.values(k, c);
    out << '\n';
  }
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_trajectory_csv(out, traj);
}

Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  Trajectory traj;
  {
    std::stringstream header(line);
    std::string cell;
    std::getline(header, cell, ',');
    while (std::getline(header, cell, ',')) traj.component_names.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != traj.component_names.size() + 1)
      throw std::runtime_error(path + ": ragged row");
    rows.push_back(std::move(vals));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(traj.component_names.size());
  traj.times.resize(n);
  traj.values.resize(n, d);
  for (Eigen::Index k = 0; k < n; ++k) {
    traj.times[k] = rows[k][0];
    for (Eigen::Index c = 0; c < d; ++c) traj.values(k, c) = rows[k][c + 1];
  }
  return traj;
}

}  // namespace odebench
