#include "odebench/spline.hpp"

#include <cmath>
#include <limits>

namespace odebench {

namespace {

struct ReinschSystem {
  Mat Q;  // n x (n - 2)
  Mat R;  // (n - 2) x (n - 2)
};

ReinschSystem reinsch(const Vec& t) {
  const Eigen::Index n = t.size();
  ReinschSystem s{Mat::Zero(n, n - 2), Mat::Zero(n - 2, n - 2)};
  for (Eigen::Index j = 1; j + 1 < n; ++j) {
    const double h0 = t[j] - t[j - 1];
    const double h1 = t[j + 1] - t[j];
    const Eigen::Index c = j - 1;
    s.Q(j - 1, c) = 1.0 / h0;
    s.Q(j, c) = -1.0 / h0 - 1.0 / h1;
    s.Q(j + 1, c) = 1.0 / h1;
    s.R(c, c) = (h0 + h1) / 3.0;
    if (c + 1 < n - 2) {
      s.R(c, c + 1) = h1 / 6.0;
      s.R(c + 1, c) = h1 / 6.0;
    }
  }
  return s;
}

struct SmoothResult {
  Vec g, gamma;
  double gcv;
};

SmoothResult smooth(const ReinschSystem& s, const Vec& y, double alpha) {
  const Eigen::Index n = y.size();
  const Mat B = s.R + alpha * s.Q.transpose() * s.Q;
  const Eigen::LDLT<Mat> ldlt(B);
  const Vec gam = ldlt.solve(s.Q.transpose() * y);
  SmoothResult out;
  out.g = y - alpha * s.Q * gam;
  out.gamma = Vec::Zero(n);
  out.gamma.segment(1, n - 2) = gam;
  // tr A = n - alpha tr(Q B^-1 Q^T)
  const Mat BinvQt = ldlt.solve(s.Q.transpose());
  const double tr_a = static_cast<double>(n) - alpha * (s.Q * BinvQt).trace();
  const double rss = (y - out.g).squaredNorm();
  const double denom = static_cast<double>(n) - tr_a;
  out.gcv = denom > 1e-12 ? static_cast<double>(n) * rss / (denom * denom)
                          : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace

SmoothingSpline::SmoothingSpline(const Vec& knots, const Vec& values) : t_(knots), y_(values) {
  const Eigen::Index n = t_.size();
  if (n < 3 || values.size() != n) throw std::invalid_argument("smoothing spline needs >= 3 knots");
  for (Eigen::Index i = 1; i < n; ++i)
    if (!(t_[i] > t_[i - 1])) throw std::invalid_argument("spline knots must increase");
  if (n == 3) {
    fit(0.0);
    return;
  }
  const ReinschSystem sys = reinsch(t_);
  const double h = (t_[n - 1] - t_[0]) / static_cast<double>(n - 1);
  const double base = std::log(h * h * h);
  // Coarse search in log alpha, then golden-section refinement.
  double best_la = base, best = std::numeric_limits<double>::infinity();
  constexpr int kCoarse = 49;
  const double lo = base - 12.0 * std::log(10.0), hi = base + 8.0 * std::log(10.0);
  for (int k = 0; k < kCoarse; ++k) {
    const double la = lo + (hi - lo) * k / (kCoarse - 1);
    const double v = smooth(sys, y_, std::exp(la)).gcv;
    if (v < best) {
      best = v;
      best_la = la;
    }
  }
  const double step = (hi - lo) / (kCoarse - 1);
  double a = best_la - step, b = best_la + step;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = smooth(sys, y_, std::exp(c)).gcv, fd = smooth(sys, y_, std::exp(d)).gcv;
  for (int it = 0; it < 40; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = smooth(sys, y_, std::exp(c)).gcv;
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = smooth(sys, y_, std::exp(d)).gcv;
    }
  }
  const double la = fc < best ? c : (fd < best ? d : best_la);
  fit(std::exp(la));
}

SmoothingSpline::SmoothingSpline(const Vec& knots, const Vec& values, double alpha)
    : t_(knots), y_(values) {
  const Eigen::Index n = t_.size();
  if (n < 3 || values.size() != n) throw std::invalid_argument("smoothing spline needs >= 3 knots");
  if (alpha < 0.0) throw std::invalid_argument("smoothing parameter must be nonnegative");
  fit(alpha);
}

double SmoothingSpline::gcv(const Vec& knots, const Vec& values, double alpha) {
  return smooth(reinsch(knots), values, alpha).gcv;
}

void SmoothingSpline::fit(double alpha) {
  const SmoothResult r = smooth(reinsch(t_), y_, alpha);
  g_ = r.g;
  gamma_ = r.gamma;
  alpha_ = alpha;
  gcv_ = r.gcv;
}

double SmoothingSpline::operator()(double t) const {
  const Eigen::Index n = t_.size();
  if (t <= t_[0]) {
    const double h = t_[1] - t_[0];
    const double slope = (g_[1] - g_[0]) / h - h * gamma_[1] / 6.0;
    return g_[0] + slope * (t - t_[0]);
  }
  if (t >= t_[n - 1]) {
    const double h = t_[n - 1] - t_[n - 2];
    const double slope = (g_[n - 1] - g_[n - 2]) / h + h * gamma_[n - 2] / 6.0;
    return g_[n - 1] + slope * (t - t_[n - 1]);
  }
  Eigen::Index lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const Eigen::Index mid = (lo + hi) / 2;
    if (t_[mid] <= t) lo = mid; else hi = mid;
  }
  const double h = t_[hi] - t_[lo];
  const double a = t - t_[lo], b = t_[hi] - t;
  return (a * g_[hi] + b * g_[lo]) / h -
         a * b / 6.0 * ((1.0 + a / h) * gamma_[hi] + (1.0 + b / h) * gamma_[lo]);
}

Vec SmoothingSpline::operator()(const Vec& t) const {
  Vec out(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) out[i] = (*this)(t[i]);
  return out;
}

}  // namespace odebench
