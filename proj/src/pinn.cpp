#include "odebench/pinn.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>

#include "json.hpp"

namespace odebench {

// ------------------------------------------------------------------ network

Eigen::Index MlpNet::parameter_count() const {
  Eigen::Index n = 0;
  for (int l = 0; l < layers(); ++l) n += W[static_cast<size_t>(l)].size() + b[static_cast<size_t>(l)].size();
  return n;
}

Vec MlpNet::flatten() const {
  Vec p(parameter_count());
  Eigen::Index k = 0;
  for (int l = 0; l < layers(); ++l) {
    const Mat& w = W[static_cast<size_t>(l)];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) p[k++] = w(r, c);
    const Vec& bb = b[static_cast<size_t>(l)];
    p.segment(k, bb.size()) = bb;
    k += bb.size();
  }
  return p;
}

void MlpNet::unflatten(const Vec& p) {
  if (p.size() != parameter_count()) throw std::invalid_argument("parameter vector has wrong length");
  Eigen::Index k = 0;
  for (int l = 0; l < layers(); ++l) {
    Mat& w = W[static_cast<size_t>(l)];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = p[k++];
    Vec& bb = b[static_cast<size_t>(l)];
    bb = p.segment(k, bb.size());
    k += bb.size();
  }
}

void MlpNet::validate() const {
  if (widths.size() < 2) throw ConfigError("network needs at least input and output widths");
  if (widths.front() != 1) throw ConfigError("network input width must be 1");
  if (W.size() != widths.size() - 1 || b.size() != W.size()) throw ConfigError("layer count mismatch");
  for (size_t l = 0; l < W.size(); ++l) {
    if (W[l].rows() != widths[l + 1] || W[l].cols() != widths[l] || b[l].size() != widths[l + 1])
      throw ConfigError("layer shape mismatch");
    if (!W[l].allFinite() || !b[l].allFinite()) throw ConfigError("non-finite network parameters");
  }
}

MlpNet MlpNet::zeros(const std::vector<int>& widths) {
  MlpNet net;
  net.widths = widths;
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] < 1 || widths[l + 1] < 1) throw ConfigError("layer widths must be positive");
    net.W.push_back(Mat::Zero(widths[l + 1], widths[l]));
    net.b.push_back(Vec::Zero(widths[l + 1]));
  }
  net.validate();
  return net;
}

MlpNet MlpNet::glorot(const std::vector<int>& widths, std::uint64_t seed) {
  MlpNet net = zeros(widths);
  std::mt19937_64 rng(seed);
  for (size_t l = 0; l < net.W.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(widths[l] + widths[l + 1]));
    std::uniform_real_distribution<double> u(-limit, limit);
    Mat& w = net.W[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
  }
  return net;
}

void PinnConfig::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (hidden.empty()) throw ConfigError("at least one hidden layer required");
  for (int w : hidden)
    if (w < 1) throw ConfigError("hidden widths must be positive");
  if (log_every < 1) throw ConfigError("log interval must be >= 1");
}

// ------------------------------------------------------------------ forward / backward

namespace {

// Activations for a batch of times (one column per time). H[l] are layer
// outputs (H[0] is the normalised input), Hd[l] their time derivatives.
struct Tape {
  std::vector<Mat> H, Hd, Zd;
};

void forward(const MlpNet& net, const TimeNormalization& norm, const Vec& times, Tape& tape) {
  const int L = net.layers();
  const Eigen::Index n = times.size();
  tape.H.resize(static_cast<size_t>(L) + 1);
  tape.Hd.resize(static_cast<size_t>(L) + 1);
  tape.Zd.resize(static_cast<size_t>(L) + 1);
  tape.H[0].resize(1, n);
  for (Eigen::Index j = 0; j < n; ++j) tape.H[0](0, j) = norm(times[j]);
  tape.Hd[0] = Mat::Constant(1, n, norm.scale());
  for (int l = 0; l < L; ++l) {
    const auto ul = static_cast<size_t>(l);
    const Mat& w = net.W[ul];
    Mat z = w * tape.H[ul];
    z.colwise() += net.b[ul];
    tape.Zd[ul + 1] = w * tape.Hd[ul];
    if (l + 1 < L) {
      tape.H[ul + 1] = z.array().tanh().matrix();
      tape.Hd[ul + 1] = ((1.0 - tape.H[ul + 1].array().square()) * tape.Zd[ul + 1].array()).matrix();
    } else {
      tape.H[ul + 1] = std::move(z);
      tape.Hd[ul + 1] = tape.Zd[ul + 1];
    }
  }
}

// Reverse pass given adjoints of the output values and output derivatives.
void backward(const MlpNet& net, const Tape& tape, Mat out_bar, Mat outd_bar, Vec& grad) {
  const int L = net.layers();
  grad.setZero(net.parameter_count());
  // Offsets of each layer in flatten() order.
  std::vector<Eigen::Index> offset(static_cast<size_t>(L));
  Eigen::Index k = 0;
  for (int l = 0; l < L; ++l) {
    offset[static_cast<size_t>(l)] = k;
    k += net.W[static_cast<size_t>(l)].size() + net.b[static_cast<size_t>(l)].size();
  }
  Mat z_bar = std::move(out_bar), zd_bar = std::move(outd_bar);
  for (int l = L - 1; l >= 0; --l) {
    const auto ul = static_cast<size_t>(l);
    if (l + 1 < L) {
      // Through h = tanh(z), hd = (1 - h^2) zd.
      const auto h = tape.H[ul + 1].array();
      const auto d1 = 1.0 - h.square();
      const Mat hb = z_bar, hdb = zd_bar;
      z_bar = (hb.array() * d1 + hdb.array() * tape.Zd[ul + 1].array() * (-2.0 * h) * d1).matrix();
      zd_bar = (hdb.array() * d1).matrix();
    }
    const Mat wbar = z_bar * tape.H[ul].transpose() + zd_bar * tape.Hd[ul].transpose();
    const Vec bbar = z_bar.rowwise().sum();
    Eigen::Index o = offset[ul];
    for (Eigen::Index r = 0; r < wbar.rows(); ++r)
      for (Eigen::Index c = 0; c < wbar.cols(); ++c) grad[o++] = wbar(r, c);
    grad.segment(o, bbar.size()) = bbar;
    if (l > 0) {
      const Mat& w = net.W[ul];
      Mat nz = w.transpose() * z_bar;
      Mat nzd = w.transpose() * zd_bar;
      z_bar = std::move(nz);
      zd_bar = std::move(nzd);
    }
  }
}

}  // namespace

std::pair<Vec, Vec> forward_with_time_derivative(const MlpNet& net, const TimeNormalization& norm,
                                                 double t) {
  if (!std::isfinite(t)) throw std::invalid_argument("time must be finite");
  Tape tape;
  forward(net, norm, Vec::Constant(1, t), tape);
  return {tape.H.back().col(0), tape.Hd.back().col(0)};
}

Mat pinn_predict(const MlpNet& net, const TimeNormalization& norm, const Vec& times) {
  Tape tape;
  forward(net, norm, times, tape);
  return tape.H.back().transpose();
}

PinnLoss pinn_loss(const MlpNet& net, const OdeModel& model, const Vec& theta,
                   const ObservationSet& data, const Vec& grid_times, double lambda,
                   const TimeNormalization& norm, Vec* grad_net, Vec* grad_theta) {
  const Eigen::Index m = grid_times.size();
  const Eigen::Index n = data.size();
  const int d = model.state_dim();
  const int p = model.param_dim();
  if (net.widths.back() != d) throw ConfigError("network output width must equal state dimension");
  if (m < 1) throw std::invalid_argument("physics grid is empty");

  Vec times(m + n);
  times << grid_times, data.times;
  Tape tape;
  forward(net, norm, times, tape);
  const Mat& out = tape.H.back();
  const Mat& outd = tape.Hd.back();

  const bool want = grad_net || grad_theta;
  Mat out_bar, outd_bar;
  if (want) {
    out_bar.setZero(d, m + n);
    outd_bar.setZero(d, m + n);
  }
  Vec g_theta = Vec::Zero(p);
  Vec f(d);
  Mat jx(d, d), jt(d, p);
  PinnLoss loss;
  const double wm = 1.0 / static_cast<double>(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const Vec x = out.col(j);
    model.eval_rhs(x, theta, grid_times[j], f);
    const Vec r = f - outd.col(j);
    loss.physics += wm * r.squaredNorm();
    if (want) {
      model.eval_jac_state(x, theta, grid_times[j], jx);
      model.eval_jac_param(x, theta, grid_times[j], jt);
      out_bar.col(j) = 2.0 * wm * jx.transpose() * r;
      outd_bar.col(j) = -2.0 * wm * r;
      g_theta += 2.0 * wm * jt.transpose() * r;
    }
  }
  if (n > 0) {
    const double wd = lambda / static_cast<double>(n);
    for (int c = 0; c < d; ++c) {
      if (!data.mask[static_cast<size_t>(c)]) continue;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double e = data.values(i, c) - out(c, m + i);
        loss.data += wd * e * e;
        if (want) out_bar(c, m + i) = -2.0 * wd * e;
      }
    }
  }
  loss.total = loss.physics + loss.data;
  if (grad_theta) *grad_theta = g_theta;
  if (grad_net) backward(net, tape, std::move(out_bar), std::move(outd_bar), *grad_net);
  return loss;
}

// ------------------------------------------------------------------ training

PinnResult train_pinn(const PinnConfig& config, const OdeModel& model, const ObservationSet& data,
                      const Vec& grid_times) {
  config.validate();
  data.validate();
  // Full-batch sums run in time order so row order never matters.
  if (!data.is_time_ordered()) return train_pinn(config, model, data.sorted_by_time(), grid_times);
  if (grid_times.size() < 2) throw ConfigError("physics grid needs at least two points");
  const int d = model.state_dim();
  const int p = model.param_dim();
  if (data.dim() != d) throw ConfigError("observation dimension mismatch");

  std::vector<int> widths{1};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(d);

  PinnResult res;
  res.net = MlpNet::glorot(widths, config.seed);
  res.norm.t_min = std::min(grid_times.minCoeff(), data.size() ? data.times.minCoeff() : grid_times.minCoeff());
  res.norm.t_max = std::max(grid_times.maxCoeff(), data.size() ? data.times.maxCoeff() : grid_times.maxCoeff());
  if (!(res.norm.t_max > res.norm.t_min)) throw ConfigError("training span must be positive");

  if (config.theta_init) {
    if (config.theta_init->size() != p) throw ConfigError("theta_init has wrong dimension");
    res.theta_init = *config.theta_init;
  } else {
    std::mt19937_64 rng(config.seed ^ 0xA0761D6478BD642FULL);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    res.theta_init.resize(p);
    for (int i = 0; i < p; ++i) res.theta_init[i] = u(rng);
  }
  for (int i = 0; i < p; ++i)
    if (model.param_positive(i) && !(res.theta_init[i] > 0.0))
      throw ConfigError("positive parameter needs a positive initial value");

  // Optimised vector: network parameters, then theta (log for positive entries).
  const Eigen::Index nw = res.net.parameter_count();
  Vec params(nw + p);
  params.head(nw) = res.net.flatten();
  for (int i = 0; i < p; ++i)
    params[nw + i] = model.param_positive(i) ? std::log(res.theta_init[i]) : res.theta_init[i];
  auto theta_of = [&](const Vec& v) {
    Vec th(p);
    for (int i = 0; i < p; ++i) th[i] = model.param_positive(i) ? std::exp(v[nw + i]) : v[nw + i];
    return th;
  };

  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-7;
  Vec m1 = Vec::Zero(nw + p), m2 = Vec::Zero(nw + p), g(nw + p), gnet, gth;
  MlpNet net = res.net;
  int t_adam = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    net.unflatten(params.head(nw));
    const Vec th = theta_of(params);
    const PinnLoss loss = pinn_loss(net, model, th, data, grid_times, config.lambda, res.norm, &gnet, &gth);
    if (epoch % config.log_every == 0) res.history.push_back({epoch, loss.physics, loss.data, loss.total});
    g.head(nw) = gnet;
    for (int i = 0; i < p; ++i) g[nw + i] = model.param_positive(i) ? gth[i] * th[i] : gth[i];
    if (!std::isfinite(loss.total) || !g.allFinite()) {
      ++res.nonfinite_steps;
      continue;
    }
    ++t_adam;
    m1 = b1 * m1 + (1.0 - b1) * g;
    m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
    const double lr_t = config.learning_rate * std::sqrt(1.0 - std::pow(b2, t_adam)) / (1.0 - std::pow(b1, t_adam));
    params.array() -= lr_t * m1.array() / (m2.array().sqrt() + eps);
  }
  res.net.unflatten(params.head(nw));
  res.theta = theta_of(params);
  const PinnLoss last = pinn_loss(res.net, model, res.theta, data, grid_times, config.lambda, res.norm);
  res.history.push_back({config.epochs, last.physics, last.data, last.total});
  res.unstable = res.nonfinite_steps * 100 >= config.epochs;
  return res;
}

// ------------------------------------------------------------------ serialisation

void write_network_json(std::ostream& os, const MlpNet& net, const TimeNormalization& norm) {
  nlohmann::ordered_json j;
  j["widths"] = net.widths;
  j["activation"] = "tanh";
  j["time_normalization"] = {{"t_min", norm.t_min}, {"t_max", norm.t_max}};
  auto layers = nlohmann::ordered_json::array();
  for (int l = 0; l < net.layers(); ++l) {
    const Mat& w = net.W[static_cast<size_t>(l)];
    std::vector<double> wv;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) wv.push_back(w(r, c));
    const Vec& bb = net.b[static_cast<size_t>(l)];
    layers.push_back({{"rows", w.rows()},
                      {"cols", w.cols()},
                      {"weights", wv},
                      {"bias", std::vector<double>(bb.data(), bb.data() + bb.size())}});
  }
  j["layers"] = layers;
  os << j.dump(1) << '\n';
}

MlpNet read_network_json(std::istream& is, TimeNormalization* norm) {
  const auto j = nlohmann::json::parse(is);
  MlpNet net = MlpNet::zeros(j.at("widths").get<std::vector<int>>());
  const auto& layers = j.at("layers");
  if (layers.size() != net.W.size()) throw ConfigError("layer count mismatch in network file");
  for (size_t l = 0; l < net.W.size(); ++l) {
    const auto wv = layers[l].at("weights").get<std::vector<double>>();
    const auto bv = layers[l].at("bias").get<std::vector<double>>();
    Mat& w = net.W[l];
    if (static_cast<Eigen::Index>(wv.size()) != w.size() || static_cast<Eigen::Index>(bv.size()) != net.b[l].size())
      throw ConfigError("layer size mismatch in network file");
    size_t k = 0;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = wv[k++];
    net.b[l] = Eigen::Map<const Vec>(bv.data(), static_cast<Eigen::Index>(bv.size()));
  }
  if (norm) {
    norm->t_min = j.at("time_normalization").at("t_min").get<double>();
    norm->t_max = j.at("time_normalization").at("t_max").get<double>();
  }
  net.validate();
  return net;
}

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& history) {
  os << "epoch,physics,data,total\n" << std::setprecision(17);
  for (const auto& r : history) os << r.epoch << ',' << r.physics << ',' << r.data << ',' << r.total << '\n';
}

}  // namespace odebench
