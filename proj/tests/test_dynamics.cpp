#include <cmath>
#include <random>

#include "doctest.h"
#include "odebench/dynamics.hpp"

using namespace odebench;

namespace {

Vec central_diff_x(const OdeModel& m, const Vec& x, const Vec& th, int j, double h, double t = 0.0) {
  Vec xp = x, xm = x;
  xp[j] += h;
  xm[j] -= h;
  return (m.rhs(xp, th, t) - m.rhs(xm, th, t)) / (2.0 * h);
}

Vec central_diff_theta(const OdeModel& m, const Vec& x, const Vec& th, int p, double h,
                       double t = 0.0) {
  Vec tp = th, tm = th;
  tp[p] += h;
  tm[p] -= h;
  return (m.rhs(x, tp, t) - m.rhs(x, tm, t)) / (2.0 * h);
}

// Relative error with an absolute floor so entries near zero compare sensibly.
double rel_err(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

Vec v3(double a, double b, double c) {
  Vec v(3);
  v << a, b, c;
  return v;
}

}  // namespace

TEST_CASE("seir log rhs by direct substitution") {
  SeirLogModel m;
  const Vec x = v3(std::log(0.05), std::log(0.04), std::log(0.01));
  const Vec f = m.rhs(x, v3(2.0, 0.2, 0.6), 0.0);
  // S = 0.9: beta I S / E - sigma, sigma E / I - gamma, gamma I / R
  CHECK(f[0] == doctest::Approx(2.0 * 0.04 * 0.9 / 0.05 - 0.6).epsilon(1e-12));
  CHECK(f[1] == doctest::Approx(0.6 * 0.05 / 0.04 - 0.2).epsilon(1e-12));
  CHECK(f[2] == doctest::Approx(0.2 * 0.04 / 0.01).epsilon(1e-12));
  CHECK(f[0] == doctest::Approx(0.84));
  CHECK(f[1] == doctest::Approx(0.55));
  CHECK(f[2] == doctest::Approx(0.8));
}

TEST_CASE("seir with contact and recovery switched off") {
  SeirLogModel m;
  const double l = std::log(0.1);
  const Vec f = m.rhs(v3(l, l, l), v3(0.0, 0.0, 0.6), 0.0);
  CHECK(f[0] == doctest::Approx(-0.6));
  CHECK(f[1] == doctest::Approx(0.6));
  CHECK(f[2] == doctest::Approx(0.0));
}

TEST_CASE("lorenz rhs values") {
  LorenzModel m;
  const Vec th = v3(8.0 / 3.0, 28.0, 10.0);
  const Vec f = m.rhs(v3(5, 5, 5), th, 0.0);
  CHECK(f[0] == doctest::Approx(0.0));
  CHECK(f[1] == doctest::Approx(110.0));
  CHECK(f[2] == doctest::Approx(25.0 - 40.0 / 3.0));
  CHECK(m.rhs(Vec::Zero(3), v3(1.3, -4.0, 7.0), 0.0).norm() == 0.0);
}

TEST_CASE("jacobians match finite differences at the documented points") {
  SeirLogModel seir;
  const Vec xs = v3(std::log(0.05), std::log(0.04), std::log(0.01));
  const Vec ts = v3(2.0, 0.2, 0.6);
  Mat fd(3, 3);
  for (int j = 0; j < 3; ++j) fd.col(j) = central_diff_x(seir, xs, ts, j, 1e-6);
  CHECK(rel_err(seir.jac_state(xs, ts, 0.0), fd) < 1e-5);

  LorenzModel lor;
  const Vec xl = v3(5, 5, 5), tl = v3(8.0 / 3.0, 28.0, 10.0);
  for (int p = 0; p < 3; ++p) fd.col(p) = central_diff_theta(lor, xl, tl, p, 1e-6);
  CHECK(rel_err(lor.jac_param(xl, tl, 0.0), fd) < 1e-6);
}

TEST_CASE("jacobians agree with finite differences at random points for every model") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const auto& name : registered_models()) {
    auto m = make_model(name);
    const int D = m->state_dim(), P = m->param_dim();
    for (int rep = 0; rep < 100; ++rep) {
      Vec x(D), th(P);
      for (int i = 0; i < D; ++i) x[i] = name == "seir-log" ? -3.0 + u(rng) : 5.0 * u(rng);
      for (int p = 0; p < P; ++p) th[p] = m->param_positive(p) ? 1.0 + 0.9 * u(rng) : 3.0 * u(rng);
      Mat fdx(D, D), fdp(D, P);
      for (int j = 0; j < D; ++j) fdx.col(j) = central_diff_x(*m, x, th, j, 1e-6, 0.3);
      for (int p = 0; p < P; ++p) fdp.col(p) = central_diff_theta(*m, x, th, p, 1e-6, 0.3);
      INFO("model ", name, " rep ", rep);
      CHECK(rel_err(m->jac_state(x, th, 0.3), fdx) < 1e-5);
      CHECK(rel_err(m->jac_param(x, th, 0.3), fdp) < 1e-5);
    }
  }
}

TEST_CASE("lorenz symmetry under (X, Y) -> (-X, -Y)") {
  LorenzModel m;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 8.0);
  const Vec th = v3(8.0 / 3.0, 28.0, 10.0);
  for (int rep = 0; rep < 50; ++rep) {
    const Vec x = v3(n(rng), n(rng), n(rng));
    const Vec y = v3(-x[0], -x[1], x[2]);
    const Vec a = m.rhs(x, th, 0.0), b = m.rhs(y, th, 0.0);
    CHECK(b[0] == doctest::Approx(-a[0]));
    CHECK(b[1] == doctest::Approx(-a[1]));
    CHECK(b[2] == doctest::Approx(a[2]));
  }
}

TEST_CASE("seir recovered compartment always grows") {
  SeirLogModel m;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> lx(-12.0, -1.5), lp(0.01, 5.0);
  for (int rep = 0; rep < 200; ++rep) {
    const Vec f = m.rhs(v3(lx(rng), lx(rng), lx(rng)), v3(lp(rng), lp(rng), lp(rng)), 0.0);
    CHECK(f[2] > 0.0);
  }
}

TEST_CASE("registry and parameter validation") {
  CHECK(make_model("seir-log")->name() == "seir-log");
  CHECK(make_model("lorenz")->param_names() == std::vector<std::string>{"beta", "rho", "sigma"});
  CHECK_THROWS_AS(make_model("nope"), ConfigError);
  CHECK_THROWS(SeirLogParams{-1.0, 0.2, 0.6}.validate());
  CHECK_NOTHROW(LorenzParams{8.0 / 3.0, -5.0, 10.0}.validate());
  CHECK(SeirLogParams::from_vector(v3(2, .2, .6)).gamma == 0.2);
  SeirLogModel m;
  CHECK_THROWS(m.rhs(Vec::Zero(2), v3(1, 1, 1), 0.0));
}
