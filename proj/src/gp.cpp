#include "odebench/gp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <vector>

#include "json.hpp"

namespace odebench {

namespace {

// Values of the radial profile phi(r) = a^2 c z^nu K_nu(z), z = sqrt(2 nu) r / l,
// and its first two derivatives in r >= 0.
struct Radial {
  double value, d1, d2;
};

double bessel_k(double order, double z) {
  // K is even in its order.
  const double v = std::abs(order);
  const double out = std::cyl_bessel_k(v, z);
  if (!std::isfinite(out)) throw NumericDomainError("non-finite modified Bessel evaluation");
  return out;
}

Radial matern_radial(const MaternHyper& h, double r) {
  constexpr double nu = kMaternNu;
  static const double norm = std::pow(2.0, 1.0 - nu) / std::tgamma(nu);
  static const double g0 = std::pow(2.0, nu - 1.0) * std::tgamma(nu);            // g(0)
  static const double g2_0 = -std::pow(2.0, nu - 2.0) * std::tgamma(nu - 1.0);   // g''(0)
  const double a2 = h.amplitude * h.amplitude;
  const double kappa = std::sqrt(2.0 * nu) / h.lengthscale;
  const double z = kappa * r;
  if (z < 1e-10) {
    // Leading-order behaviour near zero lag.
    return {a2 * norm * g0, a2 * norm * kappa * g2_0 * z, a2 * norm * kappa * kappa * g2_0};
  }
  if (z > 700.0) return {0.0, 0.0, 0.0};
  const double zn = std::pow(z, nu);
  const double k_nu = bessel_k(nu, z);
  const double k_nu1 = bessel_k(nu - 1.0, z);
  const double k_nu2 = bessel_k(nu - 2.0, z);
  const double g = zn * k_nu;
  const double g1 = -zn * k_nu1;
  const double g2 = -(zn / z) * k_nu1 + zn * k_nu2;
  return {a2 * norm * g, a2 * norm * kappa * g1, a2 * norm * kappa * kappa * g2};
}

void check_grid(const Vec& grid) {
  if (grid.size() < 2) throw std::invalid_argument("kernel grid needs at least 2 points");
  for (Eigen::Index i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw std::invalid_argument("kernel grid must increase");
  }
}

bool is_uniform(const Vec& grid) {
  const double h = (grid[grid.size() - 1] - grid[0]) / static_cast<double>(grid.size() - 1);
  for (Eigen::Index i = 1; i < grid.size(); ++i) {
    if (std::abs((grid[i] - grid[i - 1]) - h) > 1e-9 * h) return false;
  }
  return true;
}

}  // namespace

void MaternHyper::validate() const {
  if (!(amplitude > 0.0) || !std::isfinite(amplitude))
    throw std::invalid_argument("Matern amplitude must be positive");
  if (!(lengthscale > 0.0) || !std::isfinite(lengthscale))
    throw std::invalid_argument("Matern lengthscale must be positive");
  if (!std::isfinite(mean)) throw std::invalid_argument("Matern mean must be finite");
}

double matern_eval(const MaternHyper& hyper, double s, double t, int ds, int dt) {
  hyper.validate();
  if (ds < 0 || ds > 1 || dt < 0 || dt > 1)
    throw std::invalid_argument("derivative orders must be 0 or 1");
  const double r = s - t;
  const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
  const Radial p = matern_radial(hyper, std::abs(r));
  if (ds == 0 && dt == 0) return p.value;
  if (ds == 1 && dt == 0) return p.d1 * sign;
  if (ds == 0 && dt == 1) return -p.d1 * sign;
  return -p.d2;
}

double matern_dlengthscale(const MaternHyper& hyper, double s, double t) {
  // dk/dl = phi'(r) * (-r / l)
  const double r = std::abs(s - t);
  const Radial p = matern_radial(hyper, r);
  return -p.d1 * r / hyper.lengthscale;
}

double quad_form_inv(const Eigen::LLT<Mat>& chol, const Vec& v) {
  const Vec w = chol.matrixL().solve(v);
  return w.squaredNorm();
}

GpKernelMats build_kernel_mats(const MaternHyper& hyper, const Vec& grid) {
  hyper.validate();
  check_grid(grid);
  const Eigen::Index n = grid.size();
  GpKernelMats out;
  out.grid = grid;
  out.hyper = hyper;
  out.K.resize(n, n);
  out.dK.resize(n, n);
  out.Kd.resize(n, n);
  out.ddK.resize(n, n);

  auto fill = [&](Eigen::Index i, Eigen::Index j, const Radial& p) {
    const double r = grid[i] - grid[j];
    const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
    out.K(i, j) = p.value;
    out.dK(i, j) = p.d1 * sign;
    out.Kd(i, j) = -p.d1 * sign;
    out.ddK(i, j) = -p.d2;
  };

  if (is_uniform(grid)) {
    std::vector<Radial> lag(static_cast<size_t>(n));
    const double h = (grid[n - 1] - grid[0]) / static_cast<double>(n - 1);
    for (Eigen::Index k = 0; k < n; ++k) lag[static_cast<size_t>(k)] = matern_radial(hyper, h * k);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) fill(i, j, lag[static_cast<size_t>(std::abs(i - j))]);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        const Radial p = matern_radial(hyper, std::abs(grid[i] - grid[j]));
        fill(i, j, p);
        fill(j, i, p);
      }
    }
  }

  // K: plain Cholesky, then escalating jitter.
  const double a2 = hyper.amplitude * hyper.amplitude;
  double jitter = 0.0;
  for (int attempt = 0; attempt <= 4; ++attempt) {
    Mat Kj = out.K;
    if (jitter > 0.0) Kj.diagonal().array() += jitter;
    out.K_chol.compute(Kj);
    if (out.K_chol.info() == Eigen::Success) {
      out.K = Kj;
      break;
    }
    if (attempt == 4) throw ConditioningError("Cholesky of kernel matrix K failed after jitter");
    jitter = attempt == 0 ? 1e-7 * a2 : 2.0 * jitter;
  }
  out.k_jitter = jitter;

  const Mat V = out.K_chol.matrixL().solve(out.Kd);  // L^-1 K'
  out.K_inv = out.K_chol.solve(Mat::Identity(n, n));
  out.K_inv = 0.5 * (out.K_inv + out.K_inv.transpose()).eval();
  out.m = out.dK * out.K_inv;
  out.C = out.ddK - V.transpose() * V;
  out.C.diagonal().array() += kDerivativeJitter;
  out.C = 0.5 * (out.C + out.C.transpose()).eval();
  out.C_chol.compute(out.C);
  if (out.C_chol.info() != Eigen::Success) {
    throw ConditioningError("Cholesky of derivative conditional covariance C failed");
  }
  out.C_inv = out.C_chol.solve(Mat::Identity(n, n));
  out.C_inv = 0.5 * (out.C_inv + out.C_inv.transpose()).eval();
  out.log_det_K = 2.0 * out.K_chol.matrixLLT().diagonal().array().log().sum();
  out.log_det_C = 2.0 * out.C_chol.matrixLLT().diagonal().array().log().sum();
  return out;
}

// ------------------------------------------------------------------ fitting

double dominant_half_period(const Vec& times, const Vec& values) {
  const Eigen::Index n = times.size();
  if (n < 4) throw std::invalid_argument("need at least 4 points for a periodogram");
  const double t0 = times[0], t1 = times[n - 1];
  const double dt = (t1 - t0) / static_cast<double>(n - 1);
  // Linear interpolation onto a uniform grid with the same number of points.
  Vec u(n);
  Eigen::Index seg = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double t = k == n - 1 ? t1 : t0 + dt * k;
    while (seg + 2 < n && times[seg + 1] < t) ++seg;
    const double w = (t - times[seg]) / (times[seg + 1] - times[seg]);
    u[k] = values[seg] + std::clamp(w, 0.0, 1.0) * (values[seg + 1] - values[seg]);
  }
  u.array() -= u.mean();
  Eigen::Index best_k = 1;
  double best = -1.0;
  for (Eigen::Index k = 1; k <= n / 2; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * j) / static_cast<double>(n);
      acc += u[j] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    if (std::abs(acc) > best) {
      best = std::abs(acc);
      best_k = k;
    }
  }
  const double freq = static_cast<double>(best_k) / (static_cast<double>(n) * dt);
  return 0.5 / freq;
}

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct FitEval {
  double value;
  Eigen::Vector4d grad;  // d/d (log amp, log len, mean, log noise)
};

// Objective on centred data y (mean parameter is relative to the centring).
FitEval fit_objective(const Vec& times, const Vec& y, double log_amp, double log_len,
                      double mean, double log_noise, double half_period, bool want_grad) {
  const Eigen::Index n = times.size();
  MaternHyper h{std::exp(log_amp), std::exp(log_len), 0.0};
  const double noise2 = std::exp(2.0 * log_noise);
  Mat K(n, n), dKdl(n, n);
  // Uniform designs only need one radial evaluation per lag.
  std::vector<Radial> lag;
  const bool uniform = is_uniform(times);
  if (uniform) {
    const double step = (times[n - 1] - times[0]) / static_cast<double>(n - 1);
    lag.resize(static_cast<size_t>(n));
    for (Eigen::Index k = 0; k < n; ++k) lag[static_cast<size_t>(k)] = matern_radial(h, step * k);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double r = std::abs(times[i] - times[j]);
      const Radial p = uniform ? lag[static_cast<size_t>(i - j)] : matern_radial(h, r);
      K(i, j) = K(j, i) = p.value;
      const double dl = -p.d1 * r / h.lengthscale;
      dKdl(i, j) = dKdl(j, i) = dl;
    }
  }
  Mat Ky = K;
  Ky.diagonal().array() += noise2;
  Eigen::LLT<Mat> llt(Ky);
  FitEval out{std::numeric_limits<double>::infinity(), Eigen::Vector4d::Zero()};
  if (llt.info() != Eigen::Success) return out;
  const Vec r = y.array() - mean;
  const Vec alpha = llt.solve(r);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  out.value = 0.5 * r.dot(alpha) + 0.5 * logdet +
              0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  double pen_grad = 0.0;
  if (half_period > 0.0) {
    // Penalises lengthscales beyond the dominant half period, so it can only shorten a fit.
    const double x = (h.lengthscale - half_period) / half_period;
    const double sp = softplus(x);
    out.value += 10.0 * sp * sp;
    // dx/dlog l = l / hp
    pen_grad = 20.0 * sp * sigmoid(x) * (h.lengthscale / half_period);
  }
  if (!want_grad) return out;
  const Mat Kinv = llt.solve(Mat::Identity(n, n));
  const Mat W = alpha * alpha.transpose() - Kinv;  // d nll / dKy = -0.5 W
  out.grad[0] = -0.5 * (W.cwiseProduct(2.0 * K)).sum();
  out.grad[1] = -0.5 * (W.cwiseProduct(h.lengthscale * dKdl)).sum() + pen_grad;
  out.grad[2] = -alpha.sum();
  out.grad[3] = -0.5 * W.trace() * 2.0 * noise2;
  return out;
}

}  // namespace

double gp_fit_objective(const Vec& times, const Vec& values, const MaternHyper& hyper,
                        double noise_sd, double fourier_half_period) {
  return fit_objective(times, values, std::log(hyper.amplitude), std::log(hyper.lengthscale),
                       hyper.mean, std::log(noise_sd), fourier_half_period, false)
      .value;
}

GpFit gp_smooth_fit(const Vec& times, const Vec& values, bool use_fourier_prior,
                    const GpFitOptions& opt) {
  const Eigen::Index n = times.size();
  if (n < 5) throw std::invalid_argument("GP smoothing needs at least 5 observations");
  if (values.size() != n) throw std::invalid_argument("times/values size mismatch");
  for (Eigen::Index i = 1; i < n; ++i)
    if (!(times[i] > times[i - 1])) throw std::invalid_argument("observation times must increase");
  if (!values.allFinite()) throw FitError("non-finite observations");

  const double centre = values.mean();
  const Vec y = values.array() - centre;
  const double sd = std::sqrt(y.squaredNorm() / static_cast<double>(n - 1));
  const double span = times[n - 1] - times[0];
  double min_spacing = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 1; i < n; ++i) min_spacing = std::min(min_spacing, times[i] - times[i - 1]);

  GpFit fit;
  fit.fourier_prior = use_fourier_prior;
  if (!(sd > 1e-12 * std::max(1.0, std::abs(centre)))) {
    const double scale = std::max(1e-12, 1e-12 * std::abs(centre));
    fit.hyper = {1e-4 * scale, span, centre};
    fit.noise_sd = scale;
    fit.degenerate = true;
    return fit;
  }

  const double half_period = use_fourier_prior ? dominant_half_period(times, values) : 0.0;
  const double lo_amp = std::log(1e-4 * sd), hi_amp = std::log(1e4 * sd);
  const double lo_len = std::log(min_spacing), hi_len = std::log(10.0 * span);
  const double lo_noise = std::log(1e-6 * sd), hi_noise = std::log(10.0 * sd);

  // Start from the best of a few lengthscales.
  Eigen::Vector4d u(std::log(sd), std::log(0.1 * span), 0.0, std::log(0.1 * sd));
  double best = std::numeric_limits<double>::infinity();
  for (double frac : {0.02, 0.05, 0.1, 0.2, 0.5}) {
    const double ll = std::clamp(std::log(frac * span), lo_len, hi_len);
    const double v = fit_objective(times, y, u[0], ll, 0.0, u[3], half_period, false).value;
    if (v < best) {
      best = v;
      u[1] = ll;
    }
  }

  auto project = [&](Eigen::Vector4d& p) {
    p[0] = std::clamp(p[0], lo_amp, hi_amp);
    p[1] = std::clamp(p[1], lo_len, hi_len);
    p[3] = std::clamp(p[3], lo_noise, hi_noise);
  };

  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Eigen::Vector4d m1 = Eigen::Vector4d::Zero(), m2 = Eigen::Vector4d::Zero();
  // Mean moves on the data scale; Adam step is lr in every coordinate, so
  // rescale the mean coordinate by the data sd.
  const Eigen::Vector4d scale(1.0, 1.0, sd, 1.0);
  std::vector<double> history;
  history.reserve(static_cast<size_t>(opt.iterations) + 1);
  FitEval cur = fit_objective(times, y, u[0], u[1], u[2], u[3], half_period, true);
  if (!std::isfinite(cur.value)) throw FitError("GP marginal likelihood not finite at start");
  Eigen::Vector4d best_u = u;
  double best_val = cur.value;
  int it = 0;
  for (; it < opt.iterations; ++it) {
    history.push_back(cur.value);
    const Eigen::Vector4d g = cur.grad.cwiseProduct(scale);
    m1 = b1 * m1 + (1.0 - b1) * g;
    m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
    const Eigen::Vector4d step =
        (opt.learning_rate * (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps)).matrix();
    u -= step.cwiseProduct(scale);
    project(u);
    cur = fit_objective(times, y, u[0], u[1], u[2], u[3], half_period, true);
    if (!std::isfinite(cur.value)) throw FitError("GP marginal likelihood diverged");
    if (cur.value < best_val) {
      best_val = cur.value;
      best_u = u;
    }
    const auto w = static_cast<size_t>(opt.convergence_window);
    if (history.size() > w &&
        std::abs(history[history.size() - 1 - w] - cur.value) < opt.convergence_tol) {
      ++it;
      break;
    }
  }
  fit.iterations = it;
  fit.objective = best_val;
  fit.hyper = {std::exp(best_u[0]), std::exp(best_u[1]), centre + best_u[2]};
  fit.noise_sd = std::exp(best_u[3]);
  return fit;
}

std::string gp_fit_to_json(const std::string& component, const GpFit& fit) {
  nlohmann::ordered_json j;
  j["component"] = component;
  j["amplitude"] = fit.hyper.amplitude;
  j["lengthscale"] = fit.hyper.lengthscale;
  j["mean"] = fit.hyper.mean;
  j["noise_sd"] = fit.noise_sd;
  j["fourier_prior"] = fit.fourier_prior;
  return j.dump();
}

GpFit gp_fit_from_json(const std::string& text, std::string* component) {
  const auto j = nlohmann::json::parse(text);
  GpFit fit;
  fit.hyper.amplitude = j.at("amplitude").get<double>();
  fit.hyper.lengthscale = j.at("lengthscale").get<double>();
  fit.hyper.mean = j.at("mean").get<double>();
  fit.noise_sd = j.at("noise_sd").get<double>();
  fit.fourier_prior = j.at("fourier_prior").get<bool>();
  if (component) *component = j.at("component").get<std::string>();
  return fit;
}

}  // namespace odebench
