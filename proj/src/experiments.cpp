#include "odebench/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;

namespace odebench {

// ------------------------------------------------------------------ regimes

Vec RegimeSpec::extended_grid() const {
  if (forecast == ForecastProtocol::None) return in_sample_grid();
  return uniform_grid(obs_t0, forecast_t1, grid_points + forecast_grid_points);
}

Vec RegimeSpec::forecast_eval_times() const {
  if (forecast == ForecastProtocol::None) return Vec();
  if (forecast_eval_points > 0) return uniform_grid(obs_t1, forecast_t1, forecast_eval_points);
  const Vec ext = extended_grid();
  return ext.tail(forecast_grid_points);
}

void RegimeSpec::validate() const {
  const ModelPtr m = make_model(model);
  if (theta.size() != m->param_dim()) throw ConfigError(name + ": theta has wrong dimension");
  if (x0.size() != m->state_dim()) throw ConfigError(name + ": initial state has wrong dimension");
  if (static_cast<int>(mask.size()) != m->state_dim()) throw ConfigError(name + ": mask has wrong size");
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw ConfigError(name + ": no observed component");
  if (!(obs_t1 > obs_t0) || n_obs < 5) throw ConfigError(name + ": bad observation window");
  if (grid_points < n_obs) throw ConfigError(name + ": grid coarser than observations");
  if ((grid_points - 1) % (n_obs - 1) != 0) throw ConfigError(name + ": grid must nest the observation times");
  if (noise_level < 0.0) throw ConfigError(name + ": negative noise level");
  if (replicates < 1) throw ConfigError(name + ": replicate count must be positive");
  if (forecast != ForecastProtocol::None) {
    if (!(forecast_t1 > obs_t1) || forecast_grid_points < 1)
      throw ConfigError(name + ": bad forecast window");
    const double h_in = (obs_t1 - obs_t0) / (grid_points - 1);
    const double h_out = (forecast_t1 - obs_t1) / forecast_grid_points;
    if (std::abs(h_in - h_out) > 1e-12 * h_in) throw ConfigError(name + ": forecast spacing differs from in-sample");
  }
}

std::string RegimeSpec::noise_description() const {
  std::ostringstream s;
  if (noise_kind == NoiseKind::LogAdditive)
    s << "additive gaussian sd " << noise_level << " on log components (multiplicative log-normal)";
  else
    s << "additive gaussian sd " << noise_level
      << " x per-component sample sd of the truth at observation times";
  return s.str();
}

std::vector<RegimeSpec> builtin_regimes(int replicates) {
  std::vector<RegimeSpec> out;
  const double l0 = std::log(1e-3);

  RegimeSpec seir;
  seir.name = "seir-full";
  seir.model = "seir-log";
  seir.theta = Vec{{2.0, 0.2, 0.6}};
  seir.x0 = Vec{{l0, l0, l0}};
  seir.obs_t0 = 0.0;
  seir.obs_t1 = 6.0;
  seir.n_obs = 41;
  seir.noise_kind = NoiseKind::LogAdditive;
  seir.noise_level = 0.15;
  seir.mask = {true, true, true};
  seir.grid_points = 161;
  seir.forecast = ForecastProtocol::ExtendedGrid;
  seir.forecast_t1 = 12.0;
  seir.forecast_grid_points = 160;
  seir.fourier_prior = false;
  seir.log_space_metrics = true;
  seir.replicates = replicates;
  out.push_back(seir);

  RegimeSpec miss = seir;
  miss.name = "seir-missing-e";
  miss.mask = {false, true, true};
  out.push_back(miss);

  RegimeSpec lor;
  lor.name = "lorenz-chaotic";
  lor.model = "lorenz";
  lor.theta = Vec{{8.0 / 3.0, 28.0, 10.0}};
  lor.x0 = Vec{{5.0, 5.0, 5.0}};
  lor.obs_t0 = 0.0;
  lor.obs_t1 = 8.0;
  lor.n_obs = 81;
  lor.noise_kind = NoiseKind::RelativeToSd;
  lor.noise_level = 0.05;
  lor.mask = {true, true, true};
  lor.grid_points = 321;
  lor.fourier_prior = true;
  lor.replicates = replicates;
  out.push_back(lor);

  RegimeSpec stable = lor;
  stable.name = "lorenz-stable";
  stable.theta = Vec{{8.0 / 3.0, 23.0, 10.0}};
  out.push_back(stable);

  RegimeSpec fc = lor;
  fc.name = "lorenz-forecast";
  fc.obs_t1 = 2.0;
  fc.n_obs = 41;
  fc.noise_level = 0.0005;
  fc.grid_points = 81;
  fc.forecast = ForecastProtocol::Sequential;
  fc.forecast_t1 = 5.0;
  fc.forecast_grid_points = 120;
  fc.forecast_eval_points = 121;
  out.push_back(fc);

  for (const auto& r : out) r.validate();
  return out;
}

std::vector<std::string> regime_names() {
  std::vector<std::string> names;
  for (const auto& r : builtin_regimes()) names.push_back(r.name);
  return names;
}

RegimeSpec find_regime(const std::string& name, int replicates) {
  for (auto& r : builtin_regimes(replicates))
    if (r.name == name) return r;
  std::string known;
  for (const auto& n : regime_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown regime '" + name + "' (known: " + known + ")");
}

// ------------------------------------------------------------------ seeds and hashes

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string sanitize(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const std::string& canonical) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(canonical);
  return s.str();
}

std::uint64_t split_seed(std::uint64_t base, std::uint64_t replicate, const std::string& tag) {
  return splitmix64(splitmix64(base) ^ splitmix64(replicate + 0x632BE59BD9B4E019ULL) ^ fnv1a(tag));
}

std::uint64_t dataset_seed(std::uint64_t base, int replicate) {
  return split_seed(base, static_cast<std::uint64_t>(replicate), "dataset");
}

// ------------------------------------------------------------------ datasets

namespace {

// Prepends the initial time when needed so the integrator starts at x0.
Trajectory truth_at(const RegimeSpec& regime, const OdeModel& model, const Vec& times) {
  const double tol = 1e-12 * std::max(1.0, std::abs(regime.obs_t0));
  if (times.size() > 0 && std::abs(times[0] - regime.obs_t0) <= tol)
    return integrate_rk45(model, regime.x0, regime.theta, times);
  Vec full(times.size() + 1);
  full << regime.obs_t0, times;
  Trajectory tr = integrate_rk45(model, regime.x0, regime.theta, full);
  Trajectory out = tr;
  out.times = times;
  out.values = tr.values.bottomRows(times.size());
  return out;
}

}  // namespace

Trajectory truth_trajectory(const RegimeSpec& regime, const Vec& times) {
  const ModelPtr model = make_model(regime.model);
  return truth_at(regime, *model, times);
}

ObservationSet simulate_dataset(const RegimeSpec& regime, std::uint64_t seed) {
  regime.validate();
  const ModelPtr model = make_model(regime.model);
  const Vec t = regime.observation_times();
  const Trajectory truth = integrate_rk45(*model, regime.x0, regime.theta, t);
  const int d = model->state_dim();

  ObservationSet obs;
  obs.times = t;
  obs.mask = regime.mask;
  obs.seed = seed;
  obs.noise_spec = regime.noise_description();
  obs.noise_sd.assign(static_cast<size_t>(d), 0.0);
  for (int c = 0; c < d; ++c) {
    double sd = regime.noise_level;
    if (regime.noise_kind == NoiseKind::RelativeToSd) {
      const Vec col = truth.values.col(c);
      const double mean = col.mean();
      sd *= std::sqrt((col.array() - mean).square().sum() / static_cast<double>(col.size() - 1));
    }
    obs.noise_sd[static_cast<size_t>(c)] = sd;
  }
  // Noise is drawn for every component so masking never shifts the stream.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  obs.values = truth.values;
  for (Eigen::Index i = 0; i < t.size(); ++i)
    for (int c = 0; c < d; ++c) {
      const double z = normal(rng);
      if (regime.noise_level > 0.0) obs.values(i, c) += obs.noise_sd[static_cast<size_t>(c)] * z;
    }
  for (int c = 0; c < d; ++c)
    if (!obs.mask[static_cast<size_t>(c)]) {
      obs.values.col(c).setConstant(std::numeric_limits<double>::quiet_NaN());
      obs.noise_sd[static_cast<size_t>(c)] = 0.0;
    }
  obs.validate();
  return obs;
}

void write_dataset_csv(std::ostream& os, const ObservationSet& obs, const OdeModel& model) {
  const auto names = model.component_names();
  os << "t";
  for (int c = 0; c < obs.dim(); ++c)
    if (obs.mask[static_cast<size_t>(c)]) os << ',' << names[static_cast<size_t>(c)];
  os << '\n' << std::setprecision(17);
  for (Eigen::Index i = 0; i < obs.size(); ++i) {
    os << obs.times[i];
    for (int c = 0; c < obs.dim(); ++c)
      if (obs.mask[static_cast<size_t>(c)]) os << ',' << obs.values(i, c);
    os << '\n';
  }
}

void write_dataset(const std::string& path, const ObservationSet& obs, const RegimeSpec& regime) {
  const ModelPtr model = make_model(regime.model);
  {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_dataset_csv(f, obs, *model);
  }
  nlohmann::ordered_json j;
  j["regime"] = regime.name;
  j["model"] = regime.model;
  j["seed"] = obs.seed;
  j["noise"] = obs.noise_spec;
  j["noise_sd"] = obs.noise_sd;
  j["observed"] = obs.mask;
  std::ofstream f(path + ".json");
  if (!f) throw std::runtime_error("cannot write " + path + ".json");
  f << j.dump(2) << '\n';
}

ObservationSet read_dataset(const std::string& path, const RegimeSpec& regime) {
  const ModelPtr model = make_model(regime.model);
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(f, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "t") throw std::runtime_error(path + ": first column must be t");
  const auto names = model->component_names();
  std::vector<int> col_of;
  ObservationSet obs;
  obs.mask.assign(names.size(), false);
  for (size_t k = 1; k < header.size(); ++k) {
    const auto it = std::find(names.begin(), names.end(), header[k]);
    if (it == names.end()) throw std::runtime_error(path + ": unknown component " + header[k]);
    const int c = static_cast<int>(it - names.begin());
    obs.mask[static_cast<size_t>(c)] = true;
    col_of.push_back(c);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> r;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (r.size() != header.size()) throw std::runtime_error(path + ": ragged row");
    rows.push_back(std::move(r));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  obs.times.resize(n);
  obs.values = Mat::Constant(n, static_cast<Eigen::Index>(names.size()), std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < n; ++i) {
    obs.times[i] = rows[static_cast<size_t>(i)][0];
    for (size_t k = 0; k < col_of.size(); ++k) obs.values(i, col_of[k]) = rows[static_cast<size_t>(i)][k + 1];
  }
  std::ifstream side(path + ".json");
  obs.noise_sd.assign(names.size(), 0.0);
  if (side) {
    const auto j = nlohmann::json::parse(side);
    obs.seed = j.value("seed", std::uint64_t{0});
    obs.noise_spec = j.value("noise", std::string());
    obs.noise_sd = j.value("noise_sd", obs.noise_sd);
  }
  obs.validate();
  return obs;
}

// ------------------------------------------------------------------ metrics

namespace {

std::vector<Eigen::Index> locate(const Vec& haystack, const Vec& needles) {
  std::vector<Eigen::Index> idx;
  Eigen::Index j = 0;
  for (Eigen::Index i = 0; i < needles.size(); ++i) {
    const double tol = 1e-9 * std::max(1.0, std::abs(needles[i]));
    while (j < haystack.size() && haystack[j] < needles[i] - tol) ++j;
    if (j == haystack.size() || std::abs(haystack[j] - needles[i]) > tol)
      throw std::invalid_argument("evaluation time " + fmt(needles[i]) + " is not on the trajectory grid");
    idx.push_back(j);
  }
  return idx;
}

}  // namespace

Vec compute_rmse(const Trajectory& estimate, const Trajectory& truth, const Vec& eval_times) {
  if (estimate.values.cols() != truth.values.cols())
    throw std::invalid_argument("trajectories have different dimensions");
  if (eval_times.size() == 0) throw std::invalid_argument("no evaluation times");
  const auto ie = locate(estimate.times, eval_times);
  const auto it = locate(truth.times, eval_times);
  const Eigen::Index d = truth.values.cols();
  Vec out = Vec::Zero(d);
  for (size_t k = 0; k < ie.size(); ++k)
    out += (estimate.values.row(ie[k]) - truth.values.row(it[k])).cwiseAbs2().transpose();
  return (out / static_cast<double>(ie.size())).cwiseSqrt();
}

QuantitiesOfInterest quantities_of_interest(const OdeModel& model, const Vec& theta_hat,
                                            const Trajectory& forecast, double horizon_end) {
  if (model.name() != "seir-log") throw ConfigError("quantities of interest are defined for SEIR only");
  const Eigen::Index n = forecast.times.size();
  if (n == 0 || forecast.times[n - 1] < horizon_end - 1e-9 * std::max(1.0, horizon_end))
    throw std::invalid_argument("trajectory does not cover the forecast horizon");
  const SeirLogParams p = SeirLogParams::from_vector(theta_hat);
  QuantitiesOfInterest q;
  q.r0 = p.beta / p.gamma;
  const PeakResult peak = trajectory_peak(model, forecast, 1);
  q.peak_time = peak.time;
  q.peak_intensity = peak.value;
  q.peak_at_boundary = peak.at_boundary;
  return q;
}

Vec mechanistic_fidelity(const OdeModel& model, const Vec& theta, const Vec& times, const Mat& x,
                         const Mat& xdot) {
  const int d = model.state_dim();
  if (x.rows() != times.size() || xdot.rows() != times.size() || x.cols() != d || xdot.cols() != d)
    throw std::invalid_argument("fidelity inputs have inconsistent shapes");
  Vec acc = Vec::Zero(d), f(d);
  for (Eigen::Index j = 0; j < times.size(); ++j) {
    model.eval_rhs(x.row(j).transpose(), theta, times[j], f);
    acc += (xdot.row(j).transpose() - f).cwiseAbs2();
  }
  return (acc / static_cast<double>(times.size())).cwiseSqrt();
}

Mat magi_derivative(const std::vector<GpKernelMats>& kernels, const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const GpKernelMats& k = kernels[static_cast<size_t>(c)];
    out.col(c) = k.m * (x.col(c).array() - k.hyper.mean).matrix();
  }
  return out;
}

Mat pinn_derivative(const MlpNet& net, const TimeNormalization& norm, const Vec& times) {
  Mat out(times.size(), net.widths.back());
  for (Eigen::Index j = 0; j < times.size(); ++j)
    out.row(j) = forward_with_time_derivative(net, norm, times[j]).second.transpose();
  return out;
}

Vec coverage_report(const std::vector<Mat>& intervals, const Vec& truth) {
  if (intervals.size() < 2) throw std::invalid_argument("coverage needs at least 2 replicates");
  Vec hits = Vec::Zero(truth.size());
  for (const Mat& iv : intervals) {
    if (iv.rows() != truth.size() || iv.cols() != 2) throw std::invalid_argument("interval matrix must be P x 2");
    for (Eigen::Index i = 0; i < truth.size(); ++i)
      if (iv(i, 0) <= truth[i] && truth[i] <= iv(i, 1)) hits[i] += 1.0;
  }
  return hits / static_cast<double>(intervals.size());
}

// ------------------------------------------------------------------ results CSV

std::string MethodSpec::tag() const {
  if (method == "magi") return "magi";
  std::ostringstream s;
  s << "pinn-l" << pinn.lambda;
  return s.str();
}

std::string MethodSpec::canonical() const {
  std::ostringstream s;
  s << std::setprecision(17) << method;
  if (method == "magi") {
    s << ";warmup=" << magi.n_warmup << ";samples=" << magi.n_samples << ";accept=" << magi.target_accept
      << ";depth=" << magi.max_tree_depth << ";temperature=" << magi.prior_temperature
      << ";gm=" << magi.gradient_matching.iterations << '/' << magi.gradient_matching.learning_rate << '/'
      << magi.gradient_matching.curvature_weight << ";gp=" << magi.gp_fit.iterations << '/'
      << magi.gp_fit.learning_rate;
  } else {
    s << ";lambda=" << pinn.lambda << ";epochs=" << pinn.epochs << ";lr=" << pinn.learning_rate << ";hidden=";
    for (int w : pinn.hidden) s << w << 'x';
    if (pinn.theta_init)
      for (Eigen::Index i = 0; i < pinn.theta_init->size(); ++i) s << ";theta0=" << (*pinn.theta_init)[i];
  }
  return s.str();
}

void write_results_header(std::ostream& os) {
  os << "regime,method,lambda,replicate,seed,target,metric_name,value,flag\n";
}

void write_result_row(std::ostream& os, const MetricRow& r) {
  os << r.regime << ',' << r.method << ',';
  if (r.method == "pinn") os << fmt(r.lambda);
  os << ',' << r.replicate << ',' << r.seed << ',' << r.target << ',' << r.metric << ',' << fmt(r.value) << ','
     << sanitize(r.flag) << '\n';
}

std::vector<MetricRow> read_results_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(f, line);
  std::vector<MetricRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 9) throw std::runtime_error(path + ": malformed row: " + line);
    MetricRow r;
    r.regime = cells[0];
    r.method = cells[1];
    r.lambda = cells[2].empty() ? 0.0 : std::stod(cells[2]);
    r.replicate = std::stoi(cells[3]);
    r.seed = std::stoull(cells[4]);
    r.target = cells[5];
    r.metric = cells[6];
    r.value = std::stod(cells[7]);
    r.flag = cells[8];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ------------------------------------------------------------------ single run

RunOutcome run_single(const RegimeSpec& regime, const MethodSpec& method, const ObservationSet& data,
                      int replicate, std::uint64_t seed, bool forecast, const std::string& artifact_dir,
                      bool save_draws) {
  const auto start = std::chrono::steady_clock::now();
  RunOutcome out;
  const ModelPtr model = make_model(regime.model);
  const bool do_forecast = forecast && regime.forecast != ForecastProtocol::None;
  const auto comps = model->component_names();
  const auto pnames = model->param_names();
  const int d = model->state_dim();
  const int p = model->param_dim();
  std::string flag;
  auto add_flag = [&](const std::string& f) { flag += (flag.empty() ? "" : ";") + f; };

  Mat xdot;
  if (!artifact_dir.empty()) fs::create_directories(artifact_dir);

  if (method.method == "magi") {
    MagiConfig cfg = method.magi;
    cfg.fourier_prior = regime.fourier_prior;
    PosteriorSamples s;
    if (do_forecast && regime.forecast == ForecastProtocol::ExtendedGrid) {
      s = forecast_extended_grid(model, make_grid(regime.extended_grid(), data.times), data, cfg, seed);
    } else if (do_forecast && regime.forecast == ForecastProtocol::Sequential) {
      SequentialForecastOptions so;
      so.config = cfg;
      so.seed = seed;
      so.step = 1.0;
      so.points_per_step = regime.forecast_grid_points /
                           static_cast<int>(std::lround(regime.forecast_t1 - regime.obs_t1));
      SequentialForecast sf =
          forecast_sequential(model, make_grid(regime.in_sample_grid(), data.times), data, regime.forecast_t1, so);
      if (sf.integration_fallback) add_flag("integration-fallback");
      s = std::move(sf.final);
    } else {
      PreparedProblem prep = prepare_problem(model, make_grid(regime.in_sample_grid(), data.times), data, cfg);
      MagiState init{prep.init.x, prep.init.theta, prep.sigma_init.array().log().matrix()};
      s = run_inference(prep.problem, init,
                        {cfg.n_warmup, cfg.n_samples, cfg.target_accept, cfg.max_tree_depth, seed});
      s.fits = prep.fits;
      if (prep.init.fallback) {
        s.flagged = true;
        s.warning += (s.warning.empty() ? "" : "; ") + prep.init.warning;
      }
    }
    if (s.flagged) add_flag("flagged");
    out.theta_hat = s.mean_theta;
    out.theta_interval = s.theta_interval;
    out.estimate.times = s.grid;
    out.estimate.values = s.mean_x;
    std::vector<GpKernelMats> kernels;
    for (const auto& fit : s.fits) kernels.push_back(build_kernel_mats(fit.hyper, s.grid));
    xdot = magi_derivative(kernels, s.mean_x);
    if (!artifact_dir.empty()) {
      write_posterior_summary(artifact_dir + "/posterior_summary.csv", s, *model);
      nlohmann::ordered_json fits = nlohmann::ordered_json::array();
      for (size_t c = 0; c < s.fits.size(); ++c) fits.push_back(nlohmann::ordered_json::parse(gp_fit_to_json(comps[c], s.fits[c])));
      std::ofstream(artifact_dir + "/hyperparameters.json") << fits.dump(2) << '\n';
      if (save_draws) write_posterior(artifact_dir + "/draws", s, config_hash(method.canonical()));
    }
  } else if (method.method == "pinn") {
    PinnConfig cfg = method.pinn;
    cfg.seed = seed;
    const Vec grid = do_forecast ? regime.extended_grid() : regime.in_sample_grid();
    const PinnResult res = train_pinn(cfg, *model, data, grid);
    if (res.unstable) add_flag("unstable");
    out.theta_hat = res.theta;
    out.estimate.times = grid;
    out.estimate.values = res.predict(grid);
    if (do_forecast && regime.forecast_eval_points > 0) {
      // Evaluation points off the physics grid: merge them in.
      std::vector<double> all(grid.data(), grid.data() + grid.size());
      const Vec ev = regime.forecast_eval_times();
      all.insert(all.end(), ev.data(), ev.data() + ev.size());
      std::sort(all.begin(), all.end());
      all.erase(std::unique(all.begin(), all.end(),
                            [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); }),
                all.end());
      out.estimate.times = Eigen::Map<const Vec>(all.data(), static_cast<Eigen::Index>(all.size()));
      out.estimate.values = res.predict(out.estimate.times);
    }
    xdot = pinn_derivative(res.net, res.norm, out.estimate.times);
    if (!artifact_dir.empty()) {
      std::ofstream net(artifact_dir + "/network.json");
      write_network_json(net, res.net, res.norm);
      std::ofstream loss(artifact_dir + "/loss.csv");
      write_loss_csv(loss, res.history);
      nlohmann::ordered_json meta;
      meta["theta_init"] = std::vector<double>(res.theta_init.data(), res.theta_init.data() + p);
      meta["theta_hat"] = std::vector<double>(res.theta.data(), res.theta.data() + p);
      meta["time_normalization"] = {res.norm.t_min, res.norm.t_max};
      meta["nonfinite_steps"] = res.nonfinite_steps;
      std::ofstream(artifact_dir + "/run.json") << meta.dump(2) << '\n';
    }
  } else {
    throw ConfigError("unknown method '" + method.method + "'");
  }
  out.estimate.model_name = model->name();
  out.estimate.component_names = comps;

  auto row = [&](const std::string& target, const std::string& metric, double value, const std::string& extra = "") {
    MetricRow r{regime.name, method.method, method.lambda(), replicate, seed, target, metric, value, flag};
    if (!extra.empty()) r.flag += (r.flag.empty() ? "" : ";") + extra;
    out.rows.push_back(std::move(r));
  };

  // In-sample reconstruction.
  const Vec in_times = regime.in_sample_grid();
  const Trajectory truth_in = truth_at(regime, *model, in_times);
  const Vec rmse = compute_rmse(out.estimate, truth_in, in_times);
  for (int c = 0; c < d; ++c) row(comps[static_cast<size_t>(c)], "rmse", rmse[c]);

  if (do_forecast) {
    const Vec ev = regime.forecast_eval_times();
    const Trajectory truth_ev = truth_at(regime, *model, ev);
    const Vec rp = compute_rmse(out.estimate, truth_ev, ev);
    for (int c = 0; c < d; ++c) row(comps[static_cast<size_t>(c)], "rmse_pred", rp[c]);
  }

  for (int i = 0; i < p; ++i)
    row(pnames[static_cast<size_t>(i)], "abs_error", std::abs(out.theta_hat[i] - regime.theta[i]));

  if (regime.model == "seir-log") {
    const double r0_hat = out.theta_hat[0] / out.theta_hat[1];
    row("R0", "abs_error", std::abs(r0_hat - regime.theta[0] / regime.theta[1]));
    if (do_forecast) {
      const QuantitiesOfInterest q = quantities_of_interest(*model, out.theta_hat, out.estimate, regime.forecast_t1);
      const double step = (regime.obs_t1 - regime.obs_t0) / (regime.grid_points - 1);
      const PeakResult truth_peak = solve_peak(*model, regime.x0, regime.theta, regime.obs_t0, regime.forecast_t1,
                                               step / 4.0, 1);
      const std::string bflag = q.peak_at_boundary ? "peak-at-boundary" : "";
      row("peak", "peak_time_abs_error", std::abs(q.peak_time - truth_peak.time), bflag);
      row("peak", "peak_intensity_abs_error", std::abs(q.peak_intensity - truth_peak.value), bflag);
    }
  }

  const Vec fid = mechanistic_fidelity(*model, out.theta_hat, out.estimate.times, out.estimate.values, xdot);
  for (int c = 0; c < d; ++c) row(comps[static_cast<size_t>(c)], "fidelity", fid[c]);

  if (method.method == "magi") {
    for (int i = 0; i < p; ++i) {
      const bool hit = out.theta_interval(i, 0) <= regime.theta[i] && regime.theta[i] <= out.theta_interval(i, 1);
      row(pnames[static_cast<size_t>(i)], "ci_hit", hit ? 1.0 : 0.0);
    }
  }

  // Fitted values at the observation times; flat-line detection for PINN.
  const auto io = locate(out.estimate.times, data.times);
  out.fitted_at_obs.resize(data.size(), d);
  for (size_t k = 0; k < io.size(); ++k) out.fitted_at_obs.row(static_cast<Eigen::Index>(k)) = out.estimate.values.row(io[k]);
  if (method.method == "pinn") {
    for (int c : data.observed_components()) {
      const Vec fit = out.fitted_at_obs.col(c);
      const Vec y = data.values.col(c);
      const double vf = (fit.array() - fit.mean()).square().mean();
      const double vy = (y.array() - y.mean()).square().mean();
      const double ratio = vy > 0.0 ? vf / vy : 1.0;
      row(comps[static_cast<size_t>(c)], "variance_ratio", ratio, ratio < 0.1 ? "flatline" : "");
    }
  }

  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ------------------------------------------------------------------ studies

StudyResult run_study(const StudyConfig& config) {
  const RegimeSpec& regime = config.regime;
  regime.validate();
  if (config.methods.empty()) throw ConfigError("no methods requested");
  if (config.replicate_end <= config.replicate_begin) throw ConfigError("empty replicate range");
  if (config.jobs < 1) throw ConfigError("jobs must be >= 1");
  const fs::path root(config.out_dir);
  fs::create_directories(root / "datasets");
  fs::create_directories(root / "runs");
  fs::create_directories(root / "artifacts");

  // Ground truth shared by all replicates, cached once per regime.
  const fs::path truth_path = root / ("truth_" + regime.name + ".csv");
  if (!fs::exists(truth_path)) {
    Trajectory tr = truth_trajectory(regime, regime.extended_grid());
    tr.component_names = make_model(regime.model)->component_names();
    tr.model_name = regime.model;
    write_trajectory_csv(truth_path.string(), tr);
  }

  struct Work {
    int replicate;
    size_t method;
    fs::path run_file;
  };
  std::vector<Work> work;
  std::vector<ObservationSet> datasets;
  StudyResult result;
  for (int rep = config.replicate_begin; rep < config.replicate_end; ++rep) {
    std::ostringstream name;
    name << regime.name << "_r" << std::setw(4) << std::setfill('0') << rep;
    const fs::path ds = root / "datasets" / (name.str() + ".csv");
    const std::uint64_t dseed = dataset_seed(config.seed_base, rep);
    ObservationSet obs;
    if (fs::exists(ds) && fs::exists(ds.string() + ".json")) {
      obs = read_dataset(ds.string(), regime);
    } else {
      obs = simulate_dataset(regime, dseed);
      write_dataset(ds.string(), obs, regime);
    }
    datasets.push_back(std::move(obs));
    for (size_t mi = 0; mi < config.methods.size(); ++mi) {
      const MethodSpec& m = config.methods[mi];
      std::ostringstream key;
      key << regime.name << '|' << rep << '|' << config.seed_base << '|' << config.forecast << '|'
          << config.scale_note << '|' << m.canonical();
      const std::string stem = name.str() + "_" + m.tag() + (config.forecast ? "_fc" : "") + "_" +
                               config_hash(key.str()).substr(0, 12);
      const fs::path rf = root / "runs" / (stem + ".csv");
      if (fs::exists(rf)) {
        ++result.skipped;
        continue;
      }
      work.push_back({rep, mi, rf});
    }
  }

  std::mutex log_mutex;
  std::atomic<size_t> next{0};
  std::atomic<int> failures{0};
  auto worker = [&]() {
    for (size_t k = next++; k < work.size(); k = next++) {
      const Work& w = work[k];
      const MethodSpec& m = config.methods[w.method];
      const ObservationSet& obs = datasets[static_cast<size_t>(w.replicate - config.replicate_begin)];
      const std::uint64_t seed = split_seed(config.seed_base, static_cast<std::uint64_t>(w.replicate), m.tag());
      RunOutcome oc;
      try {
        const std::string art = (root / "artifacts" / w.run_file.stem()).string();
        oc = run_single(regime, m, obs, w.replicate, seed, config.forecast, art, config.save_draws);
      } catch (const std::exception& e) {
        oc.failed = true;
        oc.rows = {{regime.name, m.method, m.lambda(), w.replicate, seed, "", "error",
                    std::numeric_limits<double>::quiet_NaN(), std::string("error: ") + e.what()}};
        ++failures;
      }
      if (!config.scale_note.empty())
        for (auto& r : oc.rows) r.flag += (r.flag.empty() ? "" : ";") + config.scale_note;
      const fs::path tmp = w.run_file.string() + ".tmp";
      {
        std::ofstream f(tmp);
        write_results_header(f);
        for (const auto& r : oc.rows) write_result_row(f, r);
      }
      fs::rename(tmp, w.run_file);
      std::lock_guard<std::mutex> lock(log_mutex);
      std::ofstream timings(root / "timings.csv", std::ios::app);
      timings << w.run_file.stem().string() << ',' << std::setprecision(6) << oc.wall_seconds << '\n';
    }
  };
  const int n_threads = std::min<int>(config.jobs, static_cast<int>(std::max<size_t>(work.size(), 1)));
  std::vector<std::thread> pool;
  for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  result.runs = static_cast<int>(work.size());
  result.failures = failures;

  // Rebuild results.csv from every completed run file, sorted by name.
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root / "runs"))
    if (e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::ofstream all(root / "results.csv");
  write_results_header(all);
  for (const auto& f : files) {
    const auto rows = read_results_csv(f.string());
    for (const auto& r : rows) {
      write_result_row(all, r);
      if (r.regime == regime.name && r.replicate >= config.replicate_begin && r.replicate < config.replicate_end)
        result.rows.push_back(r);
    }
  }
  return result;
}

}  // namespace odebench
