#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace odebench {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Right-hand side contract for dx/dt = f(x, theta, t) with analytic Jacobians.
///
/// Implementations are immutable; every method is safe to call concurrently.
/// The `eval_*` methods write into caller-owned storage so hot loops in the
/// samplers never allocate.
class OdeModel {
 public:
  virtual ~OdeModel() = default;

  virtual std::string name() const = 0;
  virtual int state_dim() const = 0;
  virtual int param_dim() const = 0;
  virtual std::vector<std::string> component_names() const = 0;
  virtual std::vector<std::string> param_names() const = 0;

  virtual void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                        double t, Eigen::Ref<Vec> out) const = 0;
  /// out is D x D, out(i, j) = d f_i / d x_j.
  virtual void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                              double t, Eigen::Ref<Mat> out) const = 0;
  /// out is D x P, out(i, p) = d f_i / d theta_p.
  virtual void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta,
                              double t, Eigen::Ref<Mat> out) const = 0;

  /// Whether parameter p must stay strictly positive.
  virtual bool param_positive(int p) const = 0;

  /// Maps a state component to the scale used for peak metrics (identity
  /// unless the model works in transformed coordinates).
  virtual double to_natural(int /*component*/, double value) const { return value; }

  Vec rhs(const Vec& x, const Vec& theta, double t) const;
  Mat jac_state(const Vec& x, const Vec& theta, double t) const;
  Mat jac_param(const Vec& x, const Vec& theta, double t) const;
};

using ModelPtr = std::shared_ptr<const OdeModel>;

struct SeirLogParams {
  double beta = 0.0;     // contact rate
  double gamma = 0.0;    // infectious exit rate
  double sigma_e = 0.0;  // exposed -> infectious rate

  void validate() const;
  Vec to_vector() const;
  static SeirLogParams from_vector(const Vec& v);
};

struct LorenzParams {
  double beta = 0.0;
  double rho = 0.0;
  double sigma = 0.0;

  void validate() const;
  Vec to_vector() const;
  static LorenzParams from_vector(const Vec& v);
};

/// SEIR in (log E, log I, log R) with N = 1 and S = 1 - E - I - R.
/// Parameter order: (beta, gamma, sigma_e). S is never clamped.
class SeirLogModel final : public OdeModel {
 public:
  std::string name() const override { return "seir-log"; }
  int state_dim() const override { return 3; }
  int param_dim() const override { return 3; }
  std::vector<std::string> component_names() const override { return {"logE", "logI", "logR"}; }
  std::vector<std::string> param_names() const override { return {"beta", "gamma", "sigma"}; }
  void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                Eigen::Ref<Vec> out) const override;
  void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  bool param_positive(int) const override { return true; }
  double to_natural(int component, double value) const override;
};

/// Lorenz system, parameter order (beta, rho, sigma).
class LorenzModel final : public OdeModel {
 public:
  std::string name() const override { return "lorenz"; }
  int state_dim() const override { return 3; }
  int param_dim() const override { return 3; }
  std::vector<std::string> component_names() const override { return {"X", "Y", "Z"}; }
  std::vector<std::string> param_names() const override { return {"beta", "rho", "sigma"}; }
  void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                Eigen::Ref<Vec> out) const override;
  void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  bool param_positive(int p) const override { return p != 1; }
};

/// dx/dt = -theta * x. Small test bed for samplers and optimizers.
class DecayModel final : public OdeModel {
 public:
  std::string name() const override { return "decay"; }
  int state_dim() const override { return 1; }
  int param_dim() const override { return 1; }
  std::vector<std::string> component_names() const override { return {"x"}; }
  std::vector<std::string> param_names() const override { return {"theta"}; }
  void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                Eigen::Ref<Vec> out) const override;
  void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  bool param_positive(int) const override { return true; }
};

/// dx/dt = A x with A stored row-major in theta (P = D * D).
class LinearModel final : public OdeModel {
 public:
  explicit LinearModel(int dim);
  std::string name() const override { return "linear"; }
  int state_dim() const override { return dim_; }
  int param_dim() const override { return dim_ * dim_; }
  std::vector<std::string> component_names() const override;
  std::vector<std::string> param_names() const override;
  void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                Eigen::Ref<Vec> out) const override;
  void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  bool param_positive(int) const override { return false; }

 private:
  int dim_;
};

/// dx/dt = theta * (1 - 2 t) * x; peaks at t = 0.5 for x > 0.
class GrowthPulseModel final : public OdeModel {
 public:
  std::string name() const override { return "growth-pulse"; }
  int state_dim() const override { return 1; }
  int param_dim() const override { return 1; }
  std::vector<std::string> component_names() const override { return {"x"}; }
  std::vector<std::string> param_names() const override { return {"theta"}; }
  void eval_rhs(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                Eigen::Ref<Vec> out) const override;
  void eval_jac_state(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  void eval_jac_param(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& theta, double t,
                      Eigen::Ref<Mat> out) const override;
  bool param_positive(int) const override { return true; }
};

/// Registry lookup: "seir-log", "lorenz", "decay", "growth-pulse", "linear2".
ModelPtr make_model(std::string_view name);
std::vector<std::string> registered_models();

}  // namespace odebench
