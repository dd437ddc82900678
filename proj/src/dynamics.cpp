#include "odebench/dynamics.hpp"

#include <cmath>
#include <sstream>

namespace odebench {

namespace {

void check_sizes(const OdeModel& m, const Vec& x, const Vec& theta) {
  if (x.size() != m.state_dim() || theta.size() != m.param_dim()) {
    std::ostringstream msg;
    msg << m.name() << ": expected state of size " << m.state_dim() << " and parameters of size "
        << m.param_dim() << ", got " << x.size() << " and " << theta.size();
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace

Vec OdeModel::rhs(const Vec& x, const Vec& theta, double t) const {
  check_sizes(*this, x, theta);
  Vec out(state_dim());
  eval_rhs(x, theta, t, out);
  return out;
}

Mat OdeModel::jac_state(const Vec& x, const Vec& theta, double t) const {
  check_sizes(*this, x, theta);
  Mat out(state_dim(), state_dim());
  eval_jac_state(x, theta, t, out);
  return out;
}

Mat OdeModel::jac_param(const Vec& x, const Vec& theta, double t) const {
  check_sizes(*this, x, theta);
  Mat out(state_dim(), param_dim());
  eval_jac_param(x, theta, t, out);
  return out;
}

void SeirLogParams::validate() const {
  if (!(beta > 0.0 && gamma > 0.0 && sigma_e > 0.0)) {
    throw ConfigError("SEIR parameters must be strictly positive");
  }
}

Vec SeirLogParams::to_vector() const { return Vec{{beta, gamma, sigma_e}}; }

SeirLogParams SeirLogParams::from_vector(const Vec& v) {
  if (v.size() != 3) throw ConfigError("SEIR parameter vector must have length 3");
  return {v[0], v[1], v[2]};
}

void LorenzParams::validate() const {
  if (!(beta > 0.0 && sigma > 0.0)) {
    throw ConfigError("Lorenz beta and sigma must be strictly positive");
  }
}

Vec LorenzParams::to_vector() const { return Vec{{beta, rho, sigma}}; }

LorenzParams LorenzParams::from_vector(const Vec& v) {
  if (v.size() != 3) throw ConfigError("Lorenz parameter vector must have length 3");
  return {v[0], v[1], v[2]};
}

// ---------------------------------------------------------------- SEIR (log)

void SeirLogModel::eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                            double, Eigen::Ref<Vec> out) const {
  const double e = std::exp(x[0]), i = std::exp(x[1]), r = std::exp(x[2]);
  const double s = 1.0 - e - i - r;
  const double beta = theta[0], gamma = theta[1], sig = theta[2];
  out[0] = beta * i * s / e - sig;
  out[1] = sig * e / i - gamma;
  out[2] = gamma * i / r;
}

void SeirLogModel::eval_jac_state(const Eigen::Ref<const Vec>& x,
                                  const Eigen::Ref<const Vec>& theta, double,
                                  Eigen::Ref<Mat> out) const {
  const double e = std::exp(x[0]), i = std::exp(x[1]), r = std::exp(x[2]);
  const double s = 1.0 - e - i - r;
  const double beta = theta[0], gamma = theta[1], sig = theta[2];
  out(0, 0) = beta * i * (-1.0 - s / e);
  out(0, 1) = beta * i * (s - i) / e;
  out(0, 2) = -beta * i * r / e;
  out(1, 0) = sig * e / i;
  out(1, 1) = -sig * e / i;
  out(1, 2) = 0.0;
  out(2, 0) = 0.0;
  out(2, 1) = gamma * i / r;
  out(2, 2) = -gamma * i / r;
}

void SeirLogModel::eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&,
                                  double, Eigen::Ref<Mat> out) const {
  const double e = std::exp(x[0]), i = std::exp(x[1]), r = std::exp(x[2]);
  const double s = 1.0 - e - i - r;
  out.setZero();
  out(0, 0) = i * s / e;
  out(0, 2) = -1.0;
  out(1, 1) = -1.0;
  out(1, 2) = e / i;
  out(2, 1) = i / r;
}

double SeirLogModel::to_natural(int, double value) const { return std::exp(value); }

// ---------------------------------------------------------------- Lorenz

void LorenzModel::eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                           double, Eigen::Ref<Vec> out) const {
  const double beta = theta[0], rho = theta[1], sigma = theta[2];
  out[0] = sigma * (x[1] - x[0]);
  out[1] = x[0] * (rho - x[2]) - x[1];
  out[2] = x[0] * x[1] - beta * x[2];
}

void LorenzModel::eval_jac_state(const Eigen::Ref<const Vec>& x,
                                 const Eigen::Ref<const Vec>& theta, double,
                                 Eigen::Ref<Mat> out) const {
  const double beta = theta[0], rho = theta[1], sigma = theta[2];
  out << -sigma, sigma, 0.0,
         rho - x[2], -1.0, -x[0],
         x[1], x[0], -beta;
}

void LorenzModel::eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&,
                                 double, Eigen::Ref<Mat> out) const {
  out << 0.0, 0.0, x[1] - x[0],
         0.0, x[0], 0.0,
         -x[2], 0.0, 0.0;
}

// ---------------------------------------------------------------- test beds

void DecayModel::eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                          double, Eigen::Ref<Vec> out) const {
  out[0] = -theta[0] * x[0];
}

void DecayModel::eval_jac_state(const Eigen::Ref<const Vec>&, const Eigen::Ref<const Vec>& theta,
                                double, Eigen::Ref<Mat> out) const {
  out(0, 0) = -theta[0];
}

void DecayModel::eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&,
                                double, Eigen::Ref<Mat> out) const {
  out(0, 0) = -x[0];
}

LinearModel::LinearModel(int dim) : dim_(dim) {
  if (dim < 1) throw ConfigError("linear model dimension must be positive");
}

std::vector<std::string> LinearModel::component_names() const {
  std::vector<std::string> names;
  for (int i = 0; i < dim_; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

std::vector<std::string> LinearModel::param_names() const {
  std::vector<std::string> names;
  for (int i = 0; i < dim_; ++i)
    for (int j = 0; j < dim_; ++j) names.push_back("a" + std::to_string(i) + std::to_string(j));
  return names;
}

void LinearModel::eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                           double, Eigen::Ref<Vec> out) const {
  for (int i = 0; i < dim_; ++i) {
    double acc = 0.0;
    for (int j = 0; j < dim_; ++j) acc += theta[i * dim_ + j] * x[j];
    out[i] = acc;
  }
}

void LinearModel::eval_jac_state(const Eigen::Ref<const Vec>&, const Eigen::Ref<const Vec>& theta,
                                 double, Eigen::Ref<Mat> out) const {
  for (int i = 0; i < dim_; ++i)
    for (int j = 0; j < dim_; ++j) out(i, j) = theta[i * dim_ + j];
}

void LinearModel::eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>&,
                                 double, Eigen::Ref<Mat> out) const {
  out.setZero();
  for (int i = 0; i < dim_; ++i)
    for (int j = 0; j < dim_; ++j) out(i, i * dim_ + j) = x[j];
}

void GrowthPulseModel::eval_rhs(const Eigen::Ref<const Vec>& x,
                                const Eigen::Ref<const Vec>& theta, double t,
                                Eigen::Ref<Vec> out) const {
  out[0] = theta[0] * (1.0 - 2.0 * t) * x[0];
}

void GrowthPulseModel::eval_jac_state(const Eigen::Ref<const Vec>&,
                                      const Eigen::Ref<const Vec>& theta, double t,
                                      Eigen::Ref<Mat> out) const {
  out(0, 0) = theta[0] * (1.0 - 2.0 * t);
}

void GrowthPulseModel::eval_jac_param(const Eigen::Ref<const Vec>& x,
                                      const Eigen::Ref<const Vec>&, double t,
                                      Eigen::Ref<Mat> out) const {
  out(0, 0) = (1.0 - 2.0 * t) * x[0];
}

ModelPtr make_model(std::string_view name) {
  if (name == "seir-log") return std::make_shared<SeirLogModel>();
  if (name == "lorenz") return std::make_shared<LorenzModel>();
  if (name == "decay") return std::make_shared<DecayModel>();
  if (name == "growth-pulse") return std::make_shared<GrowthPulseModel>();
  if (name == "linear2") return std::make_shared<LinearModel>(2);
  std::ostringstream msg;
  msg << "unknown model '" << name << "'";
  throw ConfigError(msg.str());
}

std::vector<std::string> registered_models() {
  return {"seir-log", "lorenz", "decay", "growth-pulse", "linear2"};
}

}  // namespace odebench
