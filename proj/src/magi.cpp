#include "odebench/magi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "odebench/integrate.hpp"
#include "odebench/spline.hpp"

namespace odebench {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

// ------------------------------------------------------------------ problem

Eigen::Index MagiProblem::coordinate_dim() const {
  return grid_size() * state_dim() + free_param_dim() +
         static_cast<Eigen::Index>(sigma_components().size());
}

std::vector<std::string> MagiProblem::coordinate_names() const {
  std::vector<std::string> names;
  const auto comps = model->component_names();
  for (int c = 0; c < state_dim(); ++c)
    for (Eigen::Index j = 0; j < grid_size(); ++j)
      names.push_back(comps[static_cast<size_t>(c)] + "[" + std::to_string(j) + "]");
  if (!fixed_theta)
    for (const auto& p : model->param_names()) names.push_back(p);
  for (int c : sigma_components()) names.push_back("log_sigma_" + comps[static_cast<size_t>(c)]);
  return names;
}

void MagiProblem::validate() const {
  if (!model) throw ConfigError("MAGI problem has no model");
  if (static_cast<int>(kernels.size()) != state_dim())
    throw ConfigError("MAGI problem needs one kernel bundle per state component");
  for (const auto& k : kernels) {
    if (k.grid.size() != grid.size() || (k.grid - grid.times).cwiseAbs().maxCoeff() > 1e-12)
      throw ConfigError("kernel bundles must share the discretization grid");
  }
  if (observations.dim() != state_dim()) throw ConfigError("observation dimension mismatch");
  if (static_cast<Eigen::Index>(grid.obs_index.size()) != observations.size())
    throw ConfigError("grid does not index every observation time");
  const int p = model->param_dim();
  if (theta_lower.size() != p || theta_upper.size() != p)
    throw ConfigError("theta prior box has wrong dimension");
  if (fixed_theta && fixed_theta->size() != p) throw ConfigError("fixed theta has wrong dimension");
  if (!(prior_temperature > 0.0) || !std::isfinite(prior_temperature))
    throw ConfigError("prior temperature must be positive");
}

void set_default_theta_box(MagiProblem& problem) {
  const int p = problem.model->param_dim();
  problem.theta_lower.resize(p);
  problem.theta_upper.resize(p);
  for (int i = 0; i < p; ++i) {
    const bool pos = problem.model->param_positive(i);
    problem.theta_lower[i] = pos ? 1e-6 : -100.0;
    problem.theta_upper[i] = 100.0;
  }
}

Vec pack_state(const MagiProblem& problem, const MagiState& state) {
  const Eigen::Index m = problem.grid_size();
  const int d = problem.state_dim();
  if (state.x.rows() != m || state.x.cols() != d) throw std::invalid_argument("state x has wrong shape");
  if (state.theta.size() != problem.free_param_dim())
    throw std::invalid_argument("state theta has wrong dimension");
  const auto sig = problem.sigma_components();
  if (state.log_sigma.size() != static_cast<Eigen::Index>(sig.size()))
    throw std::invalid_argument("state log_sigma has wrong dimension");
  Vec q(problem.coordinate_dim());
  for (int c = 0; c < d; ++c) q.segment(c * m, m) = state.x.col(c);
  q.segment(d * m, state.theta.size()) = state.theta;
  q.tail(state.log_sigma.size()) = state.log_sigma;
  return q;
}

MagiState unpack_state(const MagiProblem& problem, const Vec& q) {
  const Eigen::Index m = problem.grid_size();
  const int d = problem.state_dim();
  if (q.size() != problem.coordinate_dim()) throw std::invalid_argument("coordinate vector has wrong size");
  MagiState s;
  s.x.resize(m, d);
  for (int c = 0; c < d; ++c) s.x.col(c) = q.segment(c * m, m);
  s.theta = q.segment(d * m, problem.free_param_dim());
  s.log_sigma = q.tail(static_cast<Eigen::Index>(problem.sigma_components().size()));
  return s;
}

// ------------------------------------------------------------------ posterior

MagiPosterior::MagiPosterior(const MagiProblem& problem) : problem_(problem) {
  problem_.validate();
  const Eigen::Index m = problem.grid_size();
  const int d = problem.state_dim();
  const int p = problem.model->param_dim();
  f_.resize(m, d);
  jac_x_.assign(static_cast<size_t>(m), Mat(d, d));
  jac_theta_.assign(static_cast<size_t>(m), Mat(d, p));
  tmp_.resize(m);
  resid_.resize(m);
  weighted_.resize(m);
}

double MagiPosterior::log_density(const Vec& q) { return evaluate(q, nullptr, nullptr); }

double MagiPosterior::log_density_grad(const Vec& q, Vec& grad) { return evaluate(q, &grad, nullptr); }

MagiTerms MagiPosterior::terms(const Vec& q) {
  MagiTerms t;
  evaluate(q, nullptr, &t);
  return t;
}

double MagiPosterior::evaluate(const Vec& q, Vec* grad, MagiTerms* terms) {
  const MagiProblem& pr = problem_;
  const Eigen::Index m = pr.grid_size();
  const int d = pr.state_dim();
  const int p = pr.model->param_dim();
  const int pfree = pr.free_param_dim();
  const auto sig_comps = pr.sigma_components();
  if (q.size() != pr.coordinate_dim()) throw std::invalid_argument("coordinate vector has wrong size");
  if (grad) grad->setZero(q.size());
  const auto outside = [terms] {
    if (terms) {
      *terms = MagiTerms{};
      terms->normalization = kNegInf;
    }
    return kNegInf;
  };

  const Vec theta = pr.fixed_theta ? *pr.fixed_theta : Vec(q.segment(d * m, p));
  if (!pr.fixed_theta) {
    for (int i = 0; i < p; ++i)
      if (!(theta[i] >= pr.theta_lower[i] && theta[i] <= pr.theta_upper[i])) return outside();
  }
  const Eigen::Index sig_off = d * m + pfree;
  for (size_t k = 0; k < sig_comps.size(); ++k) {
    const double ls = q[sig_off + static_cast<Eigen::Index>(k)];
    if (!(ls >= pr.log_sigma_lower && ls <= pr.log_sigma_upper)) return outside();
  }

  Vec xrow(d), frow(d);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (int c = 0; c < d; ++c) xrow[c] = q[c * m + j];
    const double t = pr.grid.times[j];
    pr.model->eval_rhs(xrow, theta, t, frow);
    f_.row(j) = frow.transpose();
    if (grad) {
      pr.model->eval_jac_state(xrow, theta, t, jac_x_[static_cast<size_t>(j)]);
      pr.model->eval_jac_param(xrow, theta, t, jac_theta_[static_cast<size_t>(j)]);
    }
  }
  if (!f_.allFinite()) return outside();

  MagiTerms acc;
  const double inv_t = 1.0 / pr.prior_temperature;
  std::vector<Vec> w_all;
  if (grad) w_all.resize(static_cast<size_t>(d));
  for (int c = 0; c < d; ++c) {
    const GpKernelMats& k = pr.kernels[static_cast<size_t>(c)];
    const auto xc = q.segment(c * m, m);
    tmp_ = xc.array() - k.hyper.mean;
    const Vec a = k.K_inv * tmp_;
    acc.gp_prior += -0.5 * inv_t * tmp_.dot(a);
    resid_ = f_.col(c) - k.m * tmp_;
    weighted_ = k.C_inv * resid_;
    acc.mechanistic += -0.5 * inv_t * resid_.dot(weighted_);
    if (grad) {
      auto gx = grad->segment(c * m, m);
      gx = inv_t * (-a + k.m.transpose() * weighted_);
      w_all[static_cast<size_t>(c)] = inv_t * weighted_;
    }
  }

  for (size_t k = 0; k < sig_comps.size(); ++k) {
    const int c = sig_comps[k];
    const double log_sigma = q[sig_off + static_cast<Eigen::Index>(k)];
    const double inv_var = std::exp(-2.0 * log_sigma);
    double sse = 0.0;
    const Eigen::Index n_obs = pr.observations.size();
    for (Eigen::Index i = 0; i < n_obs; ++i) {
      const Eigen::Index j = pr.grid.obs_index[static_cast<size_t>(i)];
      const double e = pr.observations.values(i, c) - q[c * m + j];
      sse += e * e;
      if (grad) (*grad)[c * m + j] += e * inv_var;
    }
    acc.observation += -0.5 * sse * inv_var;
    acc.normalization += -static_cast<double>(n_obs) * log_sigma;
    if (grad) (*grad)[sig_off + static_cast<Eigen::Index>(k)] = sse * inv_var - static_cast<double>(n_obs);
  }

  if (grad) {
    // Cross terms through the ODE right-hand side.
    for (Eigen::Index j = 0; j < m; ++j) {
      const Mat& jx = jac_x_[static_cast<size_t>(j)];
      const Mat& jt = jac_theta_[static_cast<size_t>(j)];
      for (int c2 = 0; c2 < d; ++c2) {
        const double w = w_all[static_cast<size_t>(c2)][j];
        for (int c = 0; c < d; ++c) (*grad)[c * m + j] -= jx(c2, c) * w;
        if (!pr.fixed_theta)
          for (int i = 0; i < p; ++i) (*grad)[d * m + i] -= jt(c2, i) * w;
      }
    }
  }

  if (terms) *terms = acc;
  const double total = acc.total();
  if (!std::isfinite(total)) return kNegInf;
  if (grad && !grad->allFinite()) return kNegInf;
  return total;
}

double log_posterior(const MagiProblem& problem, const MagiState& state) {
  MagiPosterior post(problem);
  return post.log_density(pack_state(problem, state));
}

Vec log_posterior_grad(const MagiProblem& problem, const MagiState& state) {
  MagiPosterior post(problem);
  Vec g;
  post.log_density_grad(pack_state(problem, state), g);
  return g;
}

// ------------------------------------------------------------------ initialisation

namespace {

// First derivative by centred differences (one-sided at the ends).
void diff1(const Vec& t, const Eigen::Ref<const Vec>& x, Eigen::Ref<Vec> out) {
  const Eigen::Index n = t.size();
  out[0] = (x[1] - x[0]) / (t[1] - t[0]);
  out[n - 1] = (x[n - 1] - x[n - 2]) / (t[n - 1] - t[n - 2]);
  for (Eigen::Index j = 1; j + 1 < n; ++j) out[j] = (x[j + 1] - x[j - 1]) / (t[j + 1] - t[j - 1]);
}

// Transpose of diff1 applied to v.
void diff1_t(const Vec& t, const Eigen::Ref<const Vec>& v, Eigen::Ref<Vec> out) {
  const Eigen::Index n = t.size();
  out.setZero();
  double h = t[1] - t[0];
  out[1] += v[0] / h;
  out[0] -= v[0] / h;
  h = t[n - 1] - t[n - 2];
  out[n - 1] += v[n - 1] / h;
  out[n - 2] -= v[n - 1] / h;
  for (Eigen::Index j = 1; j + 1 < n; ++j) {
    const double hh = t[j + 1] - t[j - 1];
    out[j + 1] += v[j] / hh;
    out[j - 1] -= v[j] / hh;
  }
}

// Second differences at interior points (0 at the ends).
void diff2(const Vec& t, const Eigen::Ref<const Vec>& x, Eigen::Ref<Vec> out) {
  const Eigen::Index n = t.size();
  out.setZero();
  for (Eigen::Index j = 1; j + 1 < n; ++j) {
    const double h0 = t[j] - t[j - 1], h1 = t[j + 1] - t[j];
    out[j] = 2.0 * ((x[j + 1] - x[j]) / h1 - (x[j] - x[j - 1]) / h0) / (h0 + h1);
  }
}

void diff2_t(const Vec& t, const Eigen::Ref<const Vec>& v, Eigen::Ref<Vec> out) {
  const Eigen::Index n = t.size();
  out.setZero();
  for (Eigen::Index j = 1; j + 1 < n; ++j) {
    const double h0 = t[j] - t[j - 1], h1 = t[j + 1] - t[j];
    const double s = 2.0 / (h0 + h1);
    out[j + 1] += v[j] * s / h1;
    out[j] -= v[j] * s * (1.0 / h1 + 1.0 / h0);
    out[j - 1] += v[j] * s / h0;
  }
}

struct GradientMatching {
  const OdeModel& model;
  Vec t;                     // in-sample grid
  std::vector<int> missing;  // component indices optimised
  double w2;

  // Objective and gradients w.r.t. x (all components; caller masks) and theta.
  double eval(const Mat& x, const Vec& theta, Mat* gx, Vec* gtheta) const {
    const Eigen::Index n = t.size();
    const int d = model.state_dim();
    const int p = model.param_dim();
    Mat dx(n, d), r(n, d);
    for (int c = 0; c < d; ++c) diff1(t, x.col(c), dx.col(c));
    Vec f(d);
    Mat jx(d, d), jt(d, p);
    if (gx) gx->setZero(n, d);
    if (gtheta) gtheta->setZero(p);
    double obj = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vec xr = x.row(j).transpose();
      model.eval_rhs(xr, theta, t[j], f);
      r.row(j) = dx.row(j) - f.transpose();
      obj += r.row(j).squaredNorm();
      if (gx || gtheta) {
        model.eval_jac_state(xr, theta, t[j], jx);
        model.eval_jac_param(xr, theta, t[j], jt);
        if (gx) gx->row(j) -= 2.0 * (jx.transpose() * r.row(j).transpose()).transpose();
        if (gtheta) *gtheta -= 2.0 * jt.transpose() * r.row(j).transpose();
      }
    }
    Vec dd(n), tmp(n);
    for (int c = 0; c < d; ++c) {
      diff2(t, x.col(c), dd);
      obj += w2 * dd.squaredNorm();
      if (gx) {
        diff1_t(t, r.col(c), tmp);
        gx->col(c) += 2.0 * tmp;
        diff2_t(t, dd, tmp);
        gx->col(c) += 2.0 * w2 * tmp;
      }
    }
    return obj;
  }
};

Vec clamp_theta(const OdeModel& model, Vec theta) {
  for (int i = 0; i < theta.size(); ++i) {
    const double lo = model.param_positive(i) ? 1e-6 : -100.0;
    theta[i] = std::clamp(theta[i], lo, 100.0);
  }
  return theta;
}

// Levenberg-Marquardt on theta with the trajectory held fixed.
Vec gauss_newton_theta(const GradientMatching& gm, const Mat& x, Vec theta) {
  const Eigen::Index n = gm.t.size();
  const int d = gm.model.state_dim();
  const int p = gm.model.param_dim();
  Mat dx(n, d);
  for (int c = 0; c < d; ++c) diff1(gm.t, x.col(c), dx.col(c));
  auto residuals = [&](const Vec& th, Mat* jac) {
    Vec r(n * d);
    Vec f(d);
    Mat jt(d, p);
    if (jac) jac->resize(n * d, p);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vec xr = x.row(j).transpose();
      gm.model.eval_rhs(xr, th, gm.t[j], f);
      r.segment(j * d, d) = dx.row(j).transpose() - f;
      if (jac) {
        gm.model.eval_jac_param(xr, th, gm.t[j], jt);
        jac->block(j * d, 0, d, p) = -jt;
      }
    }
    return r;
  };
  double mu = 1e-3;
  Mat jac;
  Vec r = residuals(theta, &jac);
  double obj = r.squaredNorm();
  for (int it = 0; it < 50 && std::isfinite(obj); ++it) {
    const Mat jtj = jac.transpose() * jac;
    const Vec jtr = jac.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 20; ++tries) {
      Mat a = jtj;
      a.diagonal() += mu * (jtj.diagonal().array() + 1e-12).matrix();
      const Vec cand = clamp_theta(gm.model, theta - a.ldlt().solve(jtr));
      const Vec rc = residuals(cand, nullptr);
      const double oc = rc.squaredNorm();
      if (std::isfinite(oc) && oc < obj) {
        const double rel = (obj - oc) / std::max(obj, 1e-300);
        theta = cand;
        obj = oc;
        r = residuals(theta, &jac);
        mu = std::max(mu * 0.3, 1e-12);
        improved = rel > 1e-12;
        break;
      }
      mu *= 10.0;
    }
    if (!improved) break;
  }
  return theta;
}

}  // namespace

MagiInit init_missing_components(const OdeModel& model, const DiscretizationGrid& grid,
                                 const ObservationSet& obs, const GradientMatchingOptions& opt) {
  obs.validate();
  if (!obs.is_time_ordered()) {
    const ObservationSet sorted = obs.sorted_by_time();
    return init_missing_components(model, make_grid(grid.times, sorted.times), sorted, opt);
  }
  const auto observed = obs.observed_components();
  if (observed.empty()) throw ConfigError("at least one component must be observed");
  if (obs.size() < 3) throw ConfigError("need at least 3 observation times");
  const int d = model.state_dim();
  const int p = model.param_dim();
  const Eigen::Index m = grid.size();
  const double last_obs = obs.times[obs.size() - 1];
  Eigen::Index m_in = 0;
  while (m_in < m && grid.times[m_in] <= last_obs + 1e-9 * std::max(1.0, std::abs(last_obs))) ++m_in;
  if (m_in < 3) throw ConfigError("grid has too few in-sample points");
  const Vec t_in = grid.times.head(m_in);

  MagiInit out;
  out.x.resize(m, d);
  double obs_mean = 0.0;
  for (int c : observed) obs_mean += obs.values.col(c).mean();
  obs_mean /= static_cast<double>(observed.size());
  std::vector<int> missing;
  for (int c = 0; c < d; ++c) {
    if (obs.mask[static_cast<size_t>(c)]) {
      const SmoothingSpline spline(obs.times, obs.values.col(c));
      out.x.col(c).head(m_in) = spline(t_in);
    } else {
      out.x.col(c).head(m_in).setConstant(obs_mean);
      missing.push_back(c);
    }
  }

  GradientMatching gm{model, t_in, missing, opt.curvature_weight};
  Mat x_in = out.x.topRows(m_in);
  Vec theta = clamp_theta(model, Vec::Ones(p));
  theta = gauss_newton_theta(gm, x_in, theta);

  // Joint Adam over missing trajectories and theta (log scale for positive parameters).
  Vec u(p);
  for (int i = 0; i < p; ++i) u[i] = model.param_positive(i) ? std::log(theta[i]) : theta[i];
  auto to_theta = [&](const Vec& uu) {
    Vec th(p);
    for (int i = 0; i < p; ++i) th[i] = model.param_positive(i) ? std::exp(uu[i]) : uu[i];
    return clamp_theta(model, th);
  };
  const Eigen::Index nx = static_cast<Eigen::Index>(missing.size()) * m_in;
  const Eigen::Index n_par = nx + p;
  Vec m1 = Vec::Zero(n_par), m2 = Vec::Zero(n_par);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Mat gx;
  Vec gth;
  double best = gm.eval(x_in, theta, nullptr, nullptr);
  Mat best_x = x_in;
  Vec best_theta = theta;
  bool failed = !std::isfinite(best);
  for (int it = 0; it < opt.iterations && !failed; ++it) {
    const Vec th = to_theta(u);
    const double obj = gm.eval(x_in, th, &gx, &gth);
    if (!std::isfinite(obj) || !gx.allFinite() || !gth.allFinite()) {
      failed = true;
      break;
    }
    if (obj < best) {
      best = obj;
      best_x = x_in;
      best_theta = th;
    }
    Vec g(n_par);
    for (size_t k = 0; k < missing.size(); ++k)
      g.segment(static_cast<Eigen::Index>(k) * m_in, m_in) = gx.col(missing[k]);
    for (int i = 0; i < p; ++i) g[nx + i] = model.param_positive(i) ? gth[i] * th[i] : gth[i];
    m1 = b1 * m1 + (1.0 - b1) * g;
    m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
    const Vec step = (opt.learning_rate * (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps)).matrix();
    for (size_t k = 0; k < missing.size(); ++k)
      x_in.col(missing[k]) -= step.segment(static_cast<Eigen::Index>(k) * m_in, m_in);
    u -= step.tail(p);
  }
  if (!failed) {
    const Vec th = to_theta(u);
    const double obj = gm.eval(x_in, th, nullptr, nullptr);
    if (std::isfinite(obj) && obj < best) {
      best = obj;
      best_x = x_in;
      best_theta = th;
    }
  }
  if (failed && !std::isfinite(best)) {
    out.fallback = true;
    out.warning = "gradient matching produced non-finite values; constant initialization used";
    best_x = out.x.topRows(m_in);
    best_theta = theta.allFinite() ? theta : clamp_theta(model, Vec::Ones(p));
  }
  out.x.topRows(m_in) = best_x;
  out.theta = best_theta;

  // Forecast segment: integrate forward from the last in-sample state.
  if (m_in < m) {
    Vec times(m - m_in + 1);
    times = grid.times.segment(m_in - 1, m - m_in + 1);
    const Vec x0 = out.x.row(m_in - 1).transpose();
    try {
      const Trajectory tr = integrate_rk45(model, x0, out.theta, times);
      out.x.bottomRows(m - m_in) = tr.values.bottomRows(m - m_in);
    } catch (const IntegrationError&) {
      out.x.bottomRows(m - m_in).rowwise() = x0.transpose();
      out.warning += (out.warning.empty() ? "" : "; ") +
                     std::string("forecast segment integration failed; constant extrapolation");
    }
  }
  return out;
}

// ------------------------------------------------------------------ preparation

namespace {

GpFit fit_missing_component(const Vec& t, const Vec& x, int max_points, const MagiConfig& config) {
  const Eigen::Index n = t.size();
  const Eigen::Index stride = std::max<Eigen::Index>(1, (n - 1) / std::max(1, max_points - 1));
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < n; i += stride) idx.push_back(i);
  if (idx.back() != n - 1) idx.push_back(n - 1);
  Vec ts(static_cast<Eigen::Index>(idx.size())), xs(static_cast<Eigen::Index>(idx.size()));
  for (size_t k = 0; k < idx.size(); ++k) {
    ts[static_cast<Eigen::Index>(k)] = t[idx[k]];
    xs[static_cast<Eigen::Index>(k)] = x[idx[k]];
  }
  return gp_smooth_fit(ts, xs, config.fourier_prior, config.gp_fit);
}

}  // namespace

PreparedProblem prepare_problem(ModelPtr model, const DiscretizationGrid& grid,
                                const ObservationSet& obs, const MagiConfig& config) {
  obs.validate();
  if (!obs.is_time_ordered()) {
    const ObservationSet sorted = obs.sorted_by_time();
    return prepare_problem(std::move(model), make_grid(grid.times, sorted.times), sorted, config);
  }
  PreparedProblem out;
  out.init = init_missing_components(*model, grid, obs, config.gradient_matching);
  const int d = model->state_dim();
  const double last_obs = obs.times[obs.size() - 1];
  Eigen::Index m_in = 0;
  while (m_in < grid.size() && grid.times[m_in] <= last_obs + 1e-9 * std::max(1.0, std::abs(last_obs)))
    ++m_in;

  MagiProblem& pr = out.problem;
  pr.model = model;
  pr.grid = grid;
  pr.observations = obs;
  pr.prior_temperature = config.prior_temperature;
  set_default_theta_box(pr);
  for (int c = 0; c < d; ++c) {
    GpFit fit = obs.mask[static_cast<size_t>(c)]
                    ? gp_smooth_fit(obs.times, obs.values.col(c), config.fourier_prior, config.gp_fit)
                    : fit_missing_component(grid.times.head(m_in), out.init.x.col(c).head(m_in),
                                            config.max_missing_fit_points, config);
    pr.kernels.push_back(build_kernel_mats(fit.hyper, grid.times));
    out.fits.push_back(fit);
  }
  const auto sig = pr.sigma_components();
  out.sigma_init.resize(static_cast<Eigen::Index>(sig.size()));
  for (size_t k = 0; k < sig.size(); ++k) {
    const double s = out.fits[static_cast<size_t>(sig[k])].noise_sd;
    out.sigma_init[static_cast<Eigen::Index>(k)] =
        std::clamp(s, std::exp(pr.log_sigma_lower) * 10.0, std::exp(pr.log_sigma_upper) * 0.1);
  }
  return out;
}

// ------------------------------------------------------------------ sampling

namespace {

// Finite-difference Hessian of the log density at q (symmetrised).
Mat fd_hessian(MagiPosterior& post, const Vec& q, bool diagonal_only, Vec* diag) {
  const Eigen::Index n = q.size();
  Vec gp(n), gm(n), qq = q;
  Mat h;
  if (!diagonal_only) h.resize(n, n);
  diag->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double step = 1e-5 * std::max(1.0, std::abs(q[i]));
    qq[i] = q[i] + step;
    const double lp = post.log_density_grad(qq, gp);
    qq[i] = q[i] - step;
    const double lm = post.log_density_grad(qq, gm);
    qq[i] = q[i];
    const bool ok = std::isfinite(lp) && std::isfinite(lm);
    if (!diagonal_only) h.col(i) = ok ? Vec((gp - gm) / (2.0 * step)) : Vec::Zero(n);
    (*diag)[i] = ok ? (gp[i] - gm[i]) / (2.0 * step) : 0.0;
  }
  if (!diagonal_only) h = 0.5 * (h + h.transpose()).eval();
  return h;
}

}  // namespace

Vec curvature_scales(MagiPosterior& post, const Vec& q) {
  Vec diag;
  fd_hessian(post, q, true, &diag);
  const Eigen::Index n = q.size();
  const Vec neg_h = -diag;
  std::vector<double> good;
  for (Eigen::Index i = 0; i < n; ++i)
    if (neg_h[i] > 0.0 && std::isfinite(neg_h[i])) good.push_back(1.0 / std::sqrt(neg_h[i]));
  double fallback = 1.0;
  if (!good.empty()) {
    std::nth_element(good.begin(), good.begin() + static_cast<long>(good.size() / 2), good.end());
    fallback = good[good.size() / 2];
  }
  Vec scales(n);
  for (Eigen::Index i = 0; i < n; ++i)
    scales[i] = (neg_h[i] > 0.0 && std::isfinite(neg_h[i])) ? 1.0 / std::sqrt(neg_h[i]) : fallback;
  return scales;
}

Mat curvature_transform(MagiPosterior& post, const Vec& q) {
  Vec diag;
  const Mat h = fd_hessian(post, q, false, &diag);
  const Eigen::Index n = q.size();
  if (!h.allFinite()) return curvature_scales(post, q).asDiagonal();
  // Work in the diagonally standardised frame so eigenvalue clipping is scale free.
  const Vec s = curvature_scales(post, q);
  const Mat a = -(s.asDiagonal() * h * s.asDiagonal());
  const Eigen::SelfAdjointEigenSolver<Mat> es(a);
  if (es.info() != Eigen::Success) return s.asDiagonal();
  Vec lam = es.eigenvalues();
  const double floor = std::max(1e-8 * lam.cwiseAbs().maxCoeff(), 1e-3);
  // Absolute values: a warm start can sit off-mode where a few directions are locally convex.
  for (Eigen::Index i = 0; i < n; ++i) lam[i] = std::max(std::abs(lam[i]), floor);
  return s.asDiagonal() * es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal();
}

MagiState PosteriorSamples::last_draw(const MagiProblem& problem) const {
  return unpack_state(problem, draws.row(draws.rows() - 1).transpose());
}

namespace {

double quantile(std::vector<double> v, double prob) {
  std::sort(v.begin(), v.end());
  const double pos = prob * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * v[lo] + w * v[hi];
}

}  // namespace

PosteriorSamples run_inference(const MagiProblem& problem, const MagiState& init,
                               const RunOptions& opt) {
  MagiPosterior post(problem);
  const Vec q0 = pack_state(problem, init);
  Vec g0;
  if (!std::isfinite(post.log_density_grad(q0, g0)))
    throw SamplerInitError("MAGI log posterior is not finite at the initial state");
  const Mat transform = opt.dense_metric ? curvature_transform(post, q0)
                                         : Mat(curvature_scales(post, q0).asDiagonal());

  Vec qbuf(q0.size()), gbuf(q0.size());
  LogDensityFn f = [&](const Vec& z, Vec& grad) {
    qbuf.noalias() = q0 + transform * z;
    const double lp = post.log_density_grad(qbuf, gbuf);
    grad.noalias() = transform.transpose() * gbuf;
    return lp;
  };
  NutsConfig cfg;
  cfg.n_warmup = opt.n_warmup;
  cfg.n_samples = opt.n_samples;
  cfg.target_accept = opt.target_accept;
  cfg.max_tree_depth = opt.max_tree_depth;
  cfg.seed = opt.seed;
  const ChainResult chain = nuts_sample(f, Vec::Zero(q0.size()), cfg);

  PosteriorSamples out;
  out.seed = opt.seed;
  out.coordinate_names = problem.coordinate_names();
  out.grid = problem.grid.times;
  out.state_dim = problem.state_dim();
  out.param_dim = problem.free_param_dim();
  out.sigma_components = problem.sigma_components();
  out.draws.resize(chain.draws.rows(), chain.draws.cols());
  for (Eigen::Index r = 0; r < chain.draws.rows(); ++r)
    out.draws.row(r) = (q0 + transform * chain.draws.row(r).transpose()).transpose();

  const Eigen::Index m = problem.grid_size();
  const int d = problem.state_dim();
  const Vec mean = out.draws.colwise().mean().transpose();
  const MagiState ms = unpack_state(problem, mean);
  out.mean_x = ms.x;
  out.mean_theta = problem.fixed_theta ? *problem.fixed_theta : ms.theta;
  out.mean_sigma = out.draws.rightCols(static_cast<Eigen::Index>(out.sigma_components.size()))
                       .array()
                       .exp()
                       .colwise()
                       .mean()
                       .transpose();
  const int p = out.param_dim;
  out.theta_interval.resize(p, 2);
  const Eigen::Index n = out.draws.rows();
  std::vector<double> col(static_cast<size_t>(n));
  for (int i = 0; i < p; ++i) {
    for (Eigen::Index r = 0; r < n; ++r) col[static_cast<size_t>(r)] = out.draws(r, d * m + i);
    out.theta_interval(i, 0) = quantile(col, 0.025);
    out.theta_interval(i, 1) = quantile(col, 0.975);
  }
  out.x_lower.resize(m, d);
  out.x_upper.resize(m, d);
  for (int c = 0; c < d; ++c) {
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index r = 0; r < n; ++r) col[static_cast<size_t>(r)] = out.draws(r, c * m + j);
      out.x_lower(j, c) = quantile(col, 0.025);
      out.x_upper(j, c) = quantile(col, 0.975);
    }
  }
  out.step_size = chain.step_size;
  out.divergence_count = chain.divergence_count;
  out.divergence_rate = static_cast<double>(chain.divergence_count) / static_cast<double>(n);
  out.mean_accept_stat = chain.mean_accept_stat;
  out.mean_tree_depth = chain.tree_depths.cast<double>().mean();
  if (out.divergence_rate > 0.25) {
    out.flagged = true;
    out.warning = "post-warmup divergence rate above 25%";
  }
  return out;
}

PosteriorSamples forecast_extended_grid(ModelPtr model, const DiscretizationGrid& grid,
                                        const ObservationSet& obs, const MagiConfig& config,
                                        std::uint64_t seed) {
  PreparedProblem prep = prepare_problem(std::move(model), grid, obs, config);
  MagiState init{prep.init.x, prep.init.theta, prep.sigma_init.array().log().matrix()};
  RunOptions ro{config.n_warmup, config.n_samples, config.target_accept, config.max_tree_depth, seed};
  PosteriorSamples out = run_inference(prep.problem, init, ro);
  out.fits = prep.fits;
  if (prep.init.fallback) {
    out.flagged = true;
    out.warning += (out.warning.empty() ? "" : "; ") + prep.init.warning;
  }
  return out;
}

SequentialForecast forecast_sequential(ModelPtr model, const DiscretizationGrid& grid,
                                       const ObservationSet& obs, double horizon,
                                       const SequentialForecastOptions& opt) {
  SequentialForecast out;
  const MagiConfig& config = opt.config;
  PreparedProblem prep = prepare_problem(model, grid, obs, config);
  MagiProblem problem = prep.problem;
  MagiState init{prep.init.x, prep.init.theta, prep.sigma_init.array().log().matrix()};
  RunOptions ro{config.n_warmup, config.n_samples, config.target_accept, config.max_tree_depth, opt.seed};
  PosteriorSamples samples = run_inference(problem, init, ro);
  samples.fits = prep.fits;
  out.grid_sizes.push_back(static_cast<int>(problem.grid_size()));

  const int d = model->state_dim();
  const double t0 = grid.times[0];
  const double tol = 1e-9 * std::max(1.0, std::abs(horizon));
  while (problem.grid.times[problem.grid_size() - 1] < horizon - tol) {
    const Eigen::Index m_old = problem.grid_size();
    const double t_end = problem.grid.times[m_old - 1];
    const double span_old = t_end - t0;
    const double h_old = span_old / static_cast<double>(m_old - 1);
    const double h_new = opt.step / opt.points_per_step;
    Vec times;
    if (std::abs(h_old - h_new) < 1e-9 * h_new) {
      times = uniform_grid(t0, t_end + opt.step, static_cast<int>(m_old) + opt.points_per_step);
    } else {
      times.resize(m_old + opt.points_per_step);
      times.head(m_old) = problem.grid.times;
      for (int k = 1; k <= opt.points_per_step; ++k) times[m_old + k - 1] = t_end + opt.step * k / opt.points_per_step;
    }
    const DiscretizationGrid new_grid = make_grid(times, obs.times);
    const Eigen::Index m_new = new_grid.size();

    // Warm start: last draw on the old segment, forward integration on the new one.
    const MagiState last = samples.last_draw(problem);
    const Vec theta = problem.fixed_theta ? *problem.fixed_theta : last.theta;
    Mat x(m_new, d);
    x.topRows(m_old) = last.x;
    const Vec boundary = last.x.row(m_old - 1).transpose();
    try {
      const Trajectory tr = integrate_rk45(*model, boundary, theta, new_grid.times.tail(m_new - m_old + 1));
      x.bottomRows(m_new - m_old) = tr.values.bottomRows(m_new - m_old);
    } catch (const IntegrationError&) {
      x.bottomRows(m_new - m_old).rowwise() = boundary.transpose();
      out.integration_fallback = true;
    }

    // Refit hyperparameters on the last unit interval of the posterior mean.
    Eigen::Index first = 0;
    while (first < m_old && problem.grid.times[first] < t_end - opt.step - 1e-9) ++first;
    const Vec t_last = problem.grid.times.segment(first, m_old - first);
    MagiProblem next;
    next.model = model;
    next.grid = new_grid;
    next.observations = obs;
    next.theta_lower = problem.theta_lower;
    next.theta_upper = problem.theta_upper;
    next.log_sigma_lower = problem.log_sigma_lower;
    next.log_sigma_upper = problem.log_sigma_upper;
    next.fixed_theta = problem.fixed_theta;
    next.prior_temperature = problem.prior_temperature;
    std::vector<GpFit> fits;
    for (int c = 0; c < d; ++c) {
      const Vec v = samples.mean_x.col(c).segment(first, m_old - first);
      GpFit fit = gp_smooth_fit(t_last, v, config.fourier_prior, config.gp_fit);
      next.kernels.push_back(build_kernel_mats(fit.hyper, new_grid.times));
      fits.push_back(fit);
    }
    problem = std::move(next);
    MagiState warm{x, last.theta, last.log_sigma};
    ++out.steps;
    ro.seed = opt.seed + static_cast<std::uint64_t>(out.steps) * 0x9E3779B97F4A7C15ULL;
    samples = run_inference(problem, warm, ro);
    samples.fits = fits;
    out.grid_sizes.push_back(static_cast<int>(m_new));
  }
  if (out.integration_fallback) {
    samples.flagged = true;
    samples.warning += (samples.warning.empty() ? "" : "; ") +
                       std::string("warm-start integration failed; constant extrapolation used");
  }
  out.final = std::move(samples);
  return out;
}

// ------------------------------------------------------------------ persistence

void write_posterior(const std::string& stem, const PosteriorSamples& s, const std::string& config_hash) {
  {
    std::ofstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + stem + ".bin");
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = s.draws;
    bin.write(reinterpret_cast<const char*>(rm.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(rm.size())));
  }
  nlohmann::ordered_json j;
  j["rows"] = s.draws.rows();
  j["cols"] = s.draws.cols();
  j["dtype"] = "float64";
  j["byte_order"] = "little";
  j["layout"] = "row-major";
  j["coordinate_names"] = s.coordinate_names;
  j["seed"] = s.seed;
  j["config_hash"] = config_hash;
  j["step_size"] = s.step_size;
  j["divergences"] = s.divergence_count;
  j["flagged"] = s.flagged;
  j["warning"] = s.warning;
  std::ofstream side(stem + ".json");
  if (!side) throw std::runtime_error("cannot open " + stem + ".json");
  side << j.dump(2) << '\n';
}

void write_posterior_summary(const std::string& path, const PosteriorSamples& s, const OdeModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << std::setprecision(17);
  out << "quantity,name,t,mean,lower,upper\n";
  const auto pnames = model.param_names();
  for (int i = 0; i < s.param_dim; ++i) {
    out << "theta," << pnames[static_cast<size_t>(i)] << ",," << s.mean_theta[i] << ','
        << s.theta_interval(i, 0) << ',' << s.theta_interval(i, 1) << '\n';
  }
  const auto cnames = model.component_names();
  for (size_t k = 0; k < s.sigma_components.size(); ++k) {
    out << "sigma," << cnames[static_cast<size_t>(s.sigma_components[k])] << ",,"
        << s.mean_sigma[static_cast<Eigen::Index>(k)] << ",,\n";
  }
  for (int c = 0; c < s.state_dim; ++c) {
    for (Eigen::Index j = 0; j < s.grid.size(); ++j) {
      out << "x," << cnames[static_cast<size_t>(c)] << ',' << s.grid[j] << ',' << s.mean_x(j, c)
          << ',' << s.x_lower(j, c) << ',' << s.x_upper(j, c) << '\n';
    }
  }
}

}  // namespace odebench
