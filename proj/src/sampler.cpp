#include "odebench/sampler.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace odebench {

void NutsConfig::validate() const {
  if (!(target_accept > 0.0 && target_accept < 1.0))
    throw ConfigError("target_accept must lie in (0, 1)");
  if (max_tree_depth < 1) throw ConfigError("max_tree_depth must be at least 1");
  if (n_warmup < 0 || n_samples < 1) throw ConfigError("invalid warmup/sample counts");
}

DualAveraging::DualAveraging(double initial_step, double target_accept, double gamma, double t0,
                             double kappa)
    : mu_(std::log(10.0 * initial_step)),
      target_(target_accept),
      gamma_(gamma),
      t0_(t0),
      kappa_(kappa),
      log_step_(std::log(initial_step)),
      log_step_bar_(0.0) {}

double DualAveraging::update(double accept_stat) {
  ++count_;
  accept_stat = std::min(1.0, accept_stat);
  const double n = static_cast<double>(count_);
  const double eta = 1.0 / (n + t0_);
  s_bar_ = (1.0 - eta) * s_bar_ + eta * (target_ - accept_stat);
  log_step_ = mu_ - s_bar_ * std::sqrt(n) / gamma_;
  const double x_eta = std::pow(n, -kappa_);
  log_step_bar_ = x_eta * log_step_ + (1.0 - x_eta) * log_step_bar_;
  return std::exp(log_step_);
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct PhasePoint {
  Vec q, p, grad;
  double logp = 0.0;
};

class Nuts {
 public:
  Nuts(const LogDensityFn& f, const NutsConfig& cfg, std::mt19937_64& rng)
      : f_(f), cfg_(cfg), rng_(rng) {}

  double hamiltonian(const PhasePoint& z) const {
    if (!std::isfinite(z.logp)) return std::numeric_limits<double>::infinity();
    return -z.logp + 0.5 * z.p.squaredNorm();
  }

  void evaluate(PhasePoint& z) const {
    z.logp = f_(z.q, z.grad);
    if (!std::isfinite(z.logp) || !z.grad.allFinite()) {
      z.logp = kNegInf;
      z.grad.setZero();
    }
  }

  void leapfrog(PhasePoint& z, double eps) const {
    z.p += 0.5 * eps * z.grad;
    z.q += eps * z.p;
    evaluate(z);
    z.p += 0.5 * eps * z.grad;
  }

  void sample_momentum(PhasePoint& z) {
    for (Eigen::Index i = 0; i < z.p.size(); ++i) z.p[i] = normal_(rng_);
  }

  double uniform() { return unif_(rng_); }

  /// Doubling/halving search for a step size giving ~50% acceptance from z.
  double initial_step_size(const PhasePoint& z0, double eps) {
    constexpr double kTarget = 0.5;
    PhasePoint z = z0;
    sample_momentum(z);
    double h0 = hamiltonian(z);
    leapfrog(z, eps);
    double dh = h0 - hamiltonian(z);
    if (std::isnan(dh)) dh = kNegInf;
    const int direction = dh > std::log(kTarget) ? 1 : -1;
    for (int iter = 0; iter < 100; ++iter) {
      z = z0;
      sample_momentum(z);
      h0 = hamiltonian(z);
      leapfrog(z, eps);
      dh = h0 - hamiltonian(z);
      if (std::isnan(dh)) dh = kNegInf;
      if (direction == 1 && !(dh > std::log(kTarget))) break;
      if (direction == -1 && !(dh < std::log(kTarget))) break;
      eps = direction == 1 ? 2.0 * eps : 0.5 * eps;
      if (eps > 1e7) throw SamplerInitError("step size search diverged (posterior improper?)");
      if (eps < 1e-300) throw SamplerInitError("step size search collapsed to zero");
    }
    return eps;
  }

  struct TransitionStats {
    double accept_stat = 0.0;
    bool divergent = false;
    int depth = 0;
    int n_leapfrog = 0;
    double energy_error = 0.0;
  };

  TransitionStats transition(PhasePoint& current, double eps) {
    eps_ = eps;
    divergent_ = false;
    n_leapfrog_ = 0;
    sum_metro_prob_ = 0.0;

    PhasePoint z = current;
    sample_momentum(z);
    const double h0 = hamiltonian(z);

    PhasePoint z_fwd = z, z_bck = z;
    PhasePoint z_sample = z, z_propose = z;
    Vec p_sharp_fwd_bck = z.p, p_sharp_fwd_fwd = z.p;
    Vec p_fwd_bck = z.p, p_fwd_fwd = z.p;
    Vec p_sharp_bck_fwd = z.p, p_sharp_bck_bck = z.p;
    Vec p_bck_fwd = z.p, p_bck_bck = z.p;
    Vec rho = z.p;
    double log_sum_weight = 0.0;
    int depth = 0;
    const Eigen::Index dim = z.q.size();

    while (depth < cfg_.max_tree_depth) {
      Vec rho_fwd = Vec::Zero(dim), rho_bck = Vec::Zero(dim);
      bool valid_subtree = false;
      double log_sum_weight_subtree = kNegInf;

      if (uniform() > 0.5) {
        PhasePoint walker = z_fwd;
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        valid_subtree = build_tree(depth, walker, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd,
                                   rho_fwd, p_fwd_bck, p_fwd_fwd, h0, 1.0,
                                   log_sum_weight_subtree);
        z_fwd = walker;
      } else {
        PhasePoint walker = z_bck;
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        valid_subtree = build_tree(depth, walker, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck,
                                   rho_bck, p_bck_fwd, p_bck_bck, h0, -1.0,
                                   log_sum_weight_subtree);
        z_bck = walker;
      }
      if (!valid_subtree) break;
      ++depth;

      if (log_sum_weight_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (uniform() < std::exp(log_sum_weight_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

      rho = rho_bck + rho_fwd;
      bool persist = criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      Vec rho_ext = rho_bck + p_fwd_bck;
      persist = persist && criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_ext);
      rho_ext = rho_fwd + p_bck_fwd;
      persist = persist && criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_ext);
      if (!persist) break;
    }

    TransitionStats stats;
    stats.depth = depth;
    stats.n_leapfrog = n_leapfrog_;
    stats.divergent = divergent_;
    stats.accept_stat = n_leapfrog_ > 0 ? sum_metro_prob_ / n_leapfrog_ : 0.0;
    const double h_new = hamiltonian(z_sample);
    stats.energy_error = std::isfinite(h_new) ? std::abs(h_new - h0) : 0.0;
    current.q = z_sample.q;
    current.grad = z_sample.grad;
    current.logp = z_sample.logp;
    return stats;
  }

 private:
  static bool criterion(const Vec& p_sharp_minus, const Vec& p_sharp_plus, const Vec& rho) {
    return p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0;
  }

  bool build_tree(int depth, PhasePoint& z, PhasePoint& z_propose, Vec& p_sharp_beg,
                  Vec& p_sharp_end, Vec& rho, Vec& p_beg, Vec& p_end, double h0, double sign,
                  double& log_sum_weight) {
    if (depth == 0) {
      leapfrog(z, sign * eps_);
      ++n_leapfrog_;
      double h = hamiltonian(z);
      if (std::isnan(h)) h = std::numeric_limits<double>::infinity();
      if (h - h0 > cfg_.max_delta_h) divergent_ = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro_prob_ += h0 - h > 0.0 ? 1.0 : std::exp(h0 - h);
      z_propose = z;
      p_sharp_beg = z.p;
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = p_beg;
      return !divergent_;
    }

    const Eigen::Index dim = z.q.size();
    double log_sum_weight_init = kNegInf;
    Vec p_init_end(dim), p_sharp_init_end(dim), rho_init = Vec::Zero(dim);
    const bool valid_init = build_tree(depth - 1, z, z_propose, p_sharp_beg, p_sharp_init_end,
                                       rho_init, p_beg, p_init_end, h0, sign,
                                       log_sum_weight_init);
    if (!valid_init) return false;

    PhasePoint z_propose_final = z;
    double log_sum_weight_final = kNegInf;
    Vec p_final_beg(dim), p_sharp_final_beg(dim), rho_final = Vec::Zero(dim);
    const bool valid_final = build_tree(depth - 1, z, z_propose_final, p_sharp_final_beg,
                                        p_sharp_end, rho_final, p_final_beg, p_end, h0, sign,
                                        log_sum_weight_final);
    if (!valid_final) return false;

    const double log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
    if (log_sum_weight_final > log_sum_weight_subtree) {
      z_propose = z_propose_final;
    } else if (uniform() < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
      z_propose = z_propose_final;
    }

    const Vec rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = criterion(p_sharp_beg, p_sharp_end, rho_subtree);
    Vec rho_ext = rho_init + p_final_beg;
    persist = persist && criterion(p_sharp_beg, p_sharp_final_beg, rho_ext);
    rho_ext = rho_final + p_init_end;
    persist = persist && criterion(p_sharp_init_end, p_sharp_end, rho_ext);
    return persist;
  }

  const LogDensityFn& f_;
  const NutsConfig& cfg_;
  std::mt19937_64& rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};

  double eps_ = 1.0;
  bool divergent_ = false;
  int n_leapfrog_ = 0;
  double sum_metro_prob_ = 0.0;
};

}  // namespace

ChainResult nuts_sample(const LogDensityFn& logdensity, const Vec& init, const NutsConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Nuts nuts(logdensity, cfg, rng);

  PhasePoint z;
  z.q = init;
  z.p = Vec::Zero(init.size());
  z.grad = Vec::Zero(init.size());
  nuts.evaluate(z);
  if (!std::isfinite(z.logp)) {
    throw SamplerInitError("log density is not finite at the initial point");
  }

  double eps = nuts.initial_step_size(z, cfg.initial_step_size);
  DualAveraging adapt(eps, cfg.target_accept);

  ChainResult out;
  out.draws.resize(cfg.n_samples, init.size());
  out.log_density.resize(cfg.n_samples);
  out.tree_depths.resize(cfg.n_samples);
  out.leapfrog_counts.resize(cfg.n_samples);
  out.energy_error.resize(cfg.n_samples);

  for (int it = 0; it < cfg.n_warmup; ++it) {
    const auto stats = nuts.transition(z, eps);
    if (stats.divergent) ++out.warmup_divergence_count;
    eps = adapt.update(stats.accept_stat);
  }
  if (cfg.n_warmup > 0) eps = adapt.final_step_size();

  double accept_sum = 0.0;
  for (int it = 0; it < cfg.n_samples; ++it) {
    const auto stats = nuts.transition(z, eps);
    if (stats.divergent) ++out.divergence_count;
    accept_sum += stats.accept_stat;
    out.draws.row(it) = z.q.transpose();
    out.log_density[it] = z.logp;
    out.tree_depths[it] = stats.depth;
    out.leapfrog_counts[it] = stats.n_leapfrog;
    out.energy_error[it] = stats.energy_error;
  }
  out.step_size = eps;
  out.mean_accept_stat = accept_sum / cfg.n_samples;
  return out;
}

}  // namespace odebench
