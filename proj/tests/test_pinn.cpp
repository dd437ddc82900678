#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "odebench/integrate.hpp"
#include "odebench/pinn.hpp"

using namespace odebench;

namespace {

MlpNet random_net(const std::vector<int>& widths, std::uint64_t seed) {
  MlpNet net = MlpNet::glorot(widths, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& bb : net.b)
    for (Eigen::Index i = 0; i < bb.size(); ++i) bb[i] = n(rng);
  return net;
}

ObservationSet lorenz_data(int n, std::uint64_t seed) {
  LorenzModel m;
  Vec th(3);
  th << 8.0 / 3.0, 28.0, 10.0;
  ObservationSet obs;
  obs.times = uniform_grid(0.0, 1.0, n);
  obs.values = integrate_rk45(m, Vec::Constant(3, 5.0), th, obs.times).values;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> e(0.0, 0.5);
  for (Eigen::Index i = 0; i < obs.values.size(); ++i) obs.values.data()[i] += e(rng);
  obs.mask = {true, true, true};
  return obs;
}

double rel_err(const Vec& a, const Vec& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-8, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("zero network is the constant output bias") {
  MlpNet net = MlpNet::zeros({1, 4, 4, 3});
  net.b.back() << 1.0, -2.0, 0.5;
  const auto [value, deriv] = forward_with_time_derivative(net, {0.0, 2.0}, 0.7);
  CHECK(value == net.b.back());
  CHECK(deriv.norm() == 0.0);
}

TEST_CASE("single hidden unit closed form") {
  MlpNet net = MlpNet::zeros({1, 1, 1});
  const double w1 = 1.7, b1 = -0.3, w2 = 0.8, b2 = 0.25;
  net.W[0](0, 0) = w1;
  net.b[0][0] = b1;
  net.W[1](0, 0) = w2;
  net.b[1][0] = b2;
  const TimeNormalization id{-1.0, 1.0};  // identity map
  for (double t : {-0.9, 0.0, 0.4, 1.0}) {
    const auto [v, d] = forward_with_time_derivative(net, id, t);
    const double th = std::tanh(w1 * t + b1);
    CHECK(std::abs(v[0] - (w2 * th + b2)) < 1e-12);
    CHECK(std::abs(d[0] - w2 * w1 * (1.0 - th * th)) < 1e-12);
  }
}

TEST_CASE("time derivative matches finite differences on a random network") {
  const MlpNet net = random_net({1, 20, 20, 20, 3}, 4);
  const TimeNormalization norm{0.0, 8.0};
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 8.0);
  const double h = 1e-6;
  for (int k = 0; k < 50; ++k) {
    const double t = u(rng);
    const Vec fd = (forward_with_time_derivative(net, norm, t + h).first -
                    forward_with_time_derivative(net, norm, t - h).first) /
                   (2 * h);
    CHECK(rel_err(forward_with_time_derivative(net, norm, t).second, fd) < 1e-6);
  }
}

TEST_CASE("constant network at a Lorenz fixed point has zero physics loss") {
  LorenzModel m;
  Vec th(3);
  th << 8.0 / 3.0, 28.0, 10.0;
  const double c = std::sqrt(th[0] * (th[1] - 1.0));
  MlpNet net = MlpNet::zeros({1, 5, 3});
  net.b.back() << c, c, th[1] - 1.0;
  ObservationSet none;
  none.times.resize(0);
  none.values.resize(0, 3);
  none.mask = {false, false, false};
  const PinnLoss loss = pinn_loss(net, m, th, none, uniform_grid(0.0, 8.0, 321), 10.0, {0.0, 8.0});
  CHECK(loss.physics < 1e-20);
  CHECK(loss.data == 0.0);
}

TEST_CASE("zero lambda leaves only the physics term") {
  LorenzModel m;
  Vec th(3);
  th << 2.0, 20.0, 9.0;
  const MlpNet net = random_net({1, 6, 6, 3}, 8);
  const PinnLoss loss = pinn_loss(net, m, th, lorenz_data(11, 1), uniform_grid(0.0, 1.0, 21), 0.0, {0.0, 1.0});
  CHECK(loss.data == 0.0);
  CHECK(loss.total == loss.physics);
}

TEST_CASE("loss gradient through the time derivative matches finite differences") {
  LorenzModel lor;
  SeirLogModel seir;
  for (const OdeModel* model : {static_cast<const OdeModel*>(&lor), static_cast<const OdeModel*>(&seir)}) {
    const bool is_lorenz = model == &lor;
    Vec th(3);
    if (is_lorenz) th << 2.5, 25.0, 9.0;
    else th << 1.8, 0.3, 0.7;
    ObservationSet data = lorenz_data(9, 3);
    if (!is_lorenz) {
      data.values = (data.values.array() * 0.02 - 4.0).matrix();
      data.mask = {false, true, true};
      data.values.col(0).setConstant(std::nan(""));
    }
    MlpNet net = random_net({1, 3, 3}, 12);
    if (!is_lorenz) net.b.back() << -4.0, -4.0, -4.0;
    const TimeNormalization norm{0.0, 1.0};
    const Vec grid = uniform_grid(0.0, 1.0, 13);
    Vec g_net, g_th;
    pinn_loss(net, *model, th, data, grid, 3.0, norm, &g_net, &g_th);

    const Vec p0 = net.flatten();
    Vec fd(p0.size());
    for (Eigen::Index i = 0; i < p0.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(p0[i]));
      Vec p = p0;
      p[i] += h;
      net.unflatten(p);
      const double up = pinn_loss(net, *model, th, data, grid, 3.0, norm).total;
      p[i] -= 2 * h;
      net.unflatten(p);
      const double dn = pinn_loss(net, *model, th, data, grid, 3.0, norm).total;
      fd[i] = (up - dn) / (2 * h);
    }
    net.unflatten(p0);
    Vec fdt(3);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-6 * std::abs(th[k]);
      Vec a = th, b = th;
      a[k] += h;
      b[k] -= h;
      fdt[k] = (pinn_loss(net, *model, a, data, grid, 3.0, norm).total -
                pinn_loss(net, *model, b, data, grid, 3.0, norm).total) /
               (2 * h);
    }
    INFO("model ", model->name());
    CHECK(rel_err(g_net, fd) < 1e-5);
    CHECK(rel_err(g_th, fdt) < 1e-5);
  }
}

TEST_CASE("training recovers the decay rate on dense clean data") {
  DecayModel m;
  ObservationSet data;
  data.times = uniform_grid(0.0, 2.0, 41);
  data.values = integrate_rk45(m, Vec::Constant(1, 1.0), Vec::Constant(1, 1.5), data.times).values;
  data.mask = {true};
  PinnConfig cfg;
  cfg.lambda = 10.0;
  cfg.epochs = 4000;
  cfg.hidden = {10, 10};
  cfg.seed = 2;
  const PinnResult r = train_pinn(cfg, m, data, uniform_grid(0.0, 2.0, 81));
  CHECK(std::abs(r.theta[0] - 1.5) < 0.05 * 1.5);
  CHECK_FALSE(r.unstable);
  for (const auto& rec : r.history) CHECK(rec.total == doctest::Approx(rec.physics + rec.data).epsilon(1e-12));
  CHECK(r.history.back().epoch == cfg.epochs);
  CHECK(r.history.size() == static_cast<size_t>(cfg.epochs / cfg.log_every + 1));
}

TEST_CASE("training is deterministic and independent of observation order") {
  LorenzModel m;
  ObservationSet data = lorenz_data(11, 9);
  PinnConfig cfg;
  cfg.epochs = 200;
  cfg.hidden = {8, 8};
  cfg.seed = 4;
  const Vec grid = uniform_grid(0.0, 1.0, 21);
  const PinnResult a = train_pinn(cfg, m, data, grid);
  const PinnResult b = train_pinn(cfg, m, data, grid);
  CHECK(a.net.flatten() == b.net.flatten());
  CHECK(a.theta == b.theta);

  ObservationSet rev = data;
  rev.times = data.times.reverse();
  rev.values = data.values.colwise().reverse();
  const PinnResult c = train_pinn(cfg, m, rev, grid);
  CHECK(c.net.flatten() == a.net.flatten());
  CHECK(c.theta == a.theta);

  // theta init is drawn in [0.5, 1.5] and logged on the result
  CHECK(a.theta_init.minCoeff() >= 0.5);
  CHECK(a.theta_init.maxCoeff() <= 1.5);
}

TEST_CASE("flatten order and JSON round trip") {
  const MlpNet net = random_net({1, 2, 3}, 6);
  const Vec p = net.flatten();
  CHECK(p.size() == 2 + 2 + 6 + 3);
  CHECK(p[0] == net.W[0](0, 0));
  CHECK(p[2] == net.b[0][0]);
  CHECK(p[4] == net.W[1](0, 0));
  CHECK(p[5] == net.W[1](0, 1));
  std::stringstream ss;
  write_network_json(ss, net, {0.5, 4.0});
  TimeNormalization norm;
  const MlpNet back = read_network_json(ss, &norm);
  CHECK(back.flatten() == p);
  CHECK(norm.t_max == 4.0);
  CHECK(pinn_predict(back, norm, uniform_grid(0.5, 4.0, 5)) == pinn_predict(net, {0.5, 4.0}, uniform_grid(0.5, 4.0, 5)));
}

TEST_CASE("configuration errors") {
  PinnConfig cfg;
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PinnConfig{};
  cfg.hidden = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  MlpNet net = MlpNet::zeros({1, 3, 2});
  LorenzModel m;
  CHECK_THROWS_AS(pinn_loss(net, m, Vec::Ones(3), lorenz_data(5, 1), uniform_grid(0, 1, 5), 1.0, {0.0, 1.0}),
                  ConfigError);
}
