// odebench: simulate datasets, run MAGI / PINN studies, summarise results.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "odebench/experiments.hpp"
#include "odebench/gp.hpp"

namespace fs = std::filesystem;
using namespace odebench;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitEmpty = 3;
constexpr int kExitPartial = 4;

std::string default_out_dir() {
  const char* env = std::getenv("ODEBENCH_OUT");
  return env && *env ? env : "odebench_out";
}

struct CommonOpts {
  std::string regime;
  int replicates = 1;
  int replicate_start = 0;
  std::uint64_t seed = 1;
  std::string out = default_out_dir();
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--regime", o.regime, "Regime name (see `regimes`)")->required();
  cmd->add_option("--replicates", o.replicates, "Number of replicates")->check(CLI::PositiveNumber);
  cmd->add_option("--replicate-start", o.replicate_start, "First replicate index")->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--out", o.out, "Output directory (default $ODEBENCH_OUT or ./odebench_out)");
}

int cmd_regimes() {
  for (const auto& r : builtin_regimes()) {
    std::cout << std::left << std::setw(16) << r.name << " model=" << r.model << " theta=(";
    for (Eigen::Index i = 0; i < r.theta.size(); ++i) std::cout << (i ? "," : "") << r.theta[i];
    std::cout << ") obs=" << r.n_obs << " on [" << r.obs_t0 << "," << r.obs_t1 << "] grid=" << r.grid_points;
    if (r.forecast != ForecastProtocol::None)
      std::cout << " forecast->" << r.forecast_t1 << " ("
                << (r.forecast == ForecastProtocol::Sequential ? "sequential" : "extended grid") << ")";
    std::cout << " noise: " << r.noise_description() << '\n';
  }
  return 0;
}

int cmd_simulate(const CommonOpts& o) {
  const RegimeSpec regime = find_regime(o.regime);
  const fs::path dir = fs::path(o.out) / "datasets";
  fs::create_directories(dir);
  for (int rep = o.replicate_start; rep < o.replicate_start + o.replicates; ++rep) {
    const std::uint64_t seed = dataset_seed(o.seed, rep);
    std::ostringstream name;
    name << regime.name << "_r" << std::setw(4) << std::setfill('0') << rep << ".csv";
    const fs::path path = dir / name.str();
    write_dataset(path.string(), simulate_dataset(regime, seed), regime);
    std::cout << path.string() << " seed=" << seed << '\n';
  }
  return 0;
}

struct InferOpts {
  CommonOpts common;
  std::string method = "magi";
  std::vector<double> lambdas{10.0};
  int epochs = 60000;
  double learning_rate = 0.01;
  int hidden_layers = 3;
  int width = 20;
  int warmup = 3000;
  int samples = 3000;
  double target_accept = 0.8;
  int max_depth = 10;
  double temperature = 1.0;
  bool forecast = false;
  bool save_draws = false;
  int jobs = 1;
  std::string scale_note;
};

int cmd_infer(const InferOpts& o) {
  StudyConfig cfg;
  cfg.regime = find_regime(o.common.regime);
  cfg.replicate_begin = o.common.replicate_start;
  cfg.replicate_end = o.common.replicate_start + o.common.replicates;
  cfg.seed_base = o.common.seed;
  cfg.out_dir = o.common.out;
  cfg.forecast = o.forecast;
  cfg.save_draws = o.save_draws;
  cfg.jobs = o.jobs;
  cfg.scale_note = o.scale_note;
  if (o.method == "magi") {
    MethodSpec m;
    m.method = "magi";
    m.magi.n_warmup = o.warmup;
    m.magi.n_samples = o.samples;
    m.magi.target_accept = o.target_accept;
    m.magi.max_tree_depth = o.max_depth;
    m.magi.prior_temperature = o.temperature;
    cfg.methods.push_back(m);
  } else if (o.method == "pinn") {
    for (double lam : o.lambdas) {
      MethodSpec m;
      m.method = "pinn";
      m.pinn.lambda = lam;
      m.pinn.epochs = o.epochs;
      m.pinn.learning_rate = o.learning_rate;
      m.pinn.hidden.assign(static_cast<size_t>(o.hidden_layers), o.width);
      m.pinn.validate();
      cfg.methods.push_back(m);
    }
  } else {
    throw ConfigError("unknown method '" + o.method + "' (magi | pinn)");
  }
  const StudyResult res = run_study(cfg);
  std::cout << "runs=" << res.runs << " skipped=" << res.skipped << " failures=" << res.failures
            << " rows=" << res.rows.size() << " results=" << (fs::path(cfg.out_dir) / "results.csv").string() << '\n';
  for (const auto& r : res.rows)
    if (r.metric == "error") std::cerr << "replicate " << r.replicate << " " << r.method << ": " << r.flag << '\n';
  if (res.runs > 0 && res.failures == res.runs) return kExitPartial;
  return 0;
}

double quantile_sorted(const std::vector<double>& v, double p) {
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

int cmd_report(const std::string& in, const std::string& out) {
  if (!fs::exists(in)) {
    std::cerr << "no results file at " << in << '\n';
    return kExitEmpty;
  }
  const auto rows = read_results_csv(in);
  using Key = std::tuple<std::string, std::string, double, std::string, std::string>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : rows)
    if (r.metric != "error" && std::isfinite(r.value))
      groups[{r.regime, r.method, r.lambda, r.metric, r.target}].push_back(r.value);
  if (groups.empty()) {
    std::cerr << "no metric rows in " << in << '\n';
    return kExitEmpty;
  }
  std::ostringstream csv;
  csv << "regime,method,lambda,metric_name,target,n,min,q1,median,q3,max\n" << std::setprecision(10);
  for (auto& [k, v] : groups) {
    std::sort(v.begin(), v.end());
    const auto& [regime, method, lambda, metric, target] = k;
    csv << regime << ',' << method << ',';
    if (method == "pinn") csv << lambda;
    csv << ',' << metric << ',' << target << ',' << v.size() << ',' << v.front() << ','
        << quantile_sorted(v, 0.25) << ',' << quantile_sorted(v, 0.5) << ',' << quantile_sorted(v, 0.75) << ','
        << v.back() << '\n';
  }
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << csv.str();
  }
  std::cout << csv.str();
  return 0;
}

// Finite-difference spot checks of the analytic derivatives.
int cmd_selfcheck() {
  int failed = 0;
  auto report = [&](const std::string& name, double err, double tol) {
    const bool ok = err <= tol;
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS " : "FAIL ") << name << " max_rel_err=" << err << " tol=" << tol << '\n';
  };
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  {  // kernel derivatives
    double worst = 0.0;
    for (int k = 0; k < 5; ++k) {
      const MaternHyper h{0.5 + 2.0 * u(rng), 0.3 + 2.0 * u(rng), 0.0};
      const double s = 3.0 * u(rng), t = 3.0 * u(rng), e = 1e-5;
      const double fd = (matern_eval(h, s + e, t + e, 0, 0) - matern_eval(h, s + e, t - e, 0, 0) -
                         matern_eval(h, s - e, t + e, 0, 0) + matern_eval(h, s - e, t - e, 0, 0)) / (4 * e * e);
      const double an = matern_eval(h, s, t, 1, 1);
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-3, std::abs(an)));
    }
    report("kernel d2K/dsdt", worst, 1e-4);
  }
  {  // integrator against exp(-t)
    const auto decay = make_model("decay");
    const Trajectory tr = integrate_rk45(*decay, Vec::Ones(1), Vec::Ones(1), uniform_grid(0.0, 1.0, 11));
    report("rk45 exp(-t)", std::abs(tr.values(10, 0) - std::exp(-1.0)), 1e-6);
  }
  {  // MAGI gradient on a short SEIR problem
    RegimeSpec r = find_regime("seir-full");
    const ObservationSet obs = simulate_dataset(r, 5);
    MagiConfig cfg;
    cfg.gradient_matching.iterations = 200;
    cfg.gp_fit.iterations = 300;
    const PreparedProblem prep = prepare_problem(make_model(r.model), make_grid(r.in_sample_grid(), obs.times), obs, cfg);
    MagiPosterior post(prep.problem);
    const Vec q = pack_state(prep.problem, {prep.init.x, prep.init.theta, prep.sigma_init.array().log().matrix()});
    Vec g;
    post.log_density_grad(q, g);
    double worst = 0.0;
    for (Eigen::Index i : {Eigen::Index{0}, q.size() / 3, q.size() / 2, q.size() - 5, q.size() - 1}) {
      const double e = 1e-6 * std::max(1.0, std::abs(q[i]));
      Vec qp = q, qm = q;
      qp[i] += e;
      qm[i] -= e;
      const double fd = (post.log_density(qp) - post.log_density(qm)) / (2 * e);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(g[i])));
    }
    report("magi log-posterior gradient", worst, 1e-4);
  }
  {  // PINN gradient through dN/dt
    const auto model = make_model("lorenz");
    MlpNet net = MlpNet::glorot({1, 3, 3}, 11);
    for (auto& b : net.b) b.setRandom();
    ObservationSet obs;
    obs.times = uniform_grid(0.0, 1.0, 6);
    obs.values = Mat::Random(6, 3);
    obs.mask = {true, true, true};
    const Vec grid = uniform_grid(0.0, 1.0, 9);
    const TimeNormalization norm{0.0, 1.0};
    const Vec theta{{8.0 / 3.0, 28.0, 10.0}};
    Vec g, gt;
    pinn_loss(net, *model, theta, obs, grid, 10.0, norm, &g, &gt);
    Vec p = net.flatten();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double e = 1e-6;
      MlpNet a = net, b = net;
      Vec pa = p, pb = p;
      pa[i] += e;
      pb[i] -= e;
      a.unflatten(pa);
      b.unflatten(pb);
      const double fd = (pinn_loss(a, *model, theta, obs, grid, 10.0, norm).total -
                         pinn_loss(b, *model, theta, obs, grid, 10.0, norm).total) / (2 * e);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(g[i])));
    }
    report("pinn loss gradient", worst, 1e-5);
  }
  return failed == 0 ? 0 : 1;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Expands `--config FILE` into flags for the chosen command. Keys already
// given on the command line are skipped, so flags win.
std::vector<std::string> merge_config(CLI::App& app, std::vector<std::string> args) {
  const auto at = std::find(args.begin(), args.end(), "--config");
  if (at == args.end()) return args;
  if (std::next(at) == args.end()) throw ConfigError("--config needs a file name");
  const std::string path = *std::next(at);
  args.erase(at, at + 2);
  const auto cmd = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.empty() || a[0] != '-'; });
  if (cmd == args.end()) throw ConfigError("--config given without a command");
  const CLI::App* sub = app.get_subcommand_no_throw(*cmd);
  if (!sub) throw ConfigError("unknown command '" + *cmd + "'");
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);

  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  std::string line;
  for (int lineno = 1; std::getline(f, line); ++lineno) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt) throw ConfigError(path + ":" + std::to_string(lineno) + ": '" + key + "' is not an option of " + *cmd);
    if (given(flag)) continue;
    if (opt->get_expected_min() == 0) {
      if (value == "true" || value == "1" || value == "yes") extra.push_back(flag);
    } else {
      extra.push_back(flag);
      extra.push_back(value);
    }
  }
  args.insert(cmd + 1, extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAGI vs PINN benchmark for ODE inverse problems", "odebench"};
  app.require_subcommand(1);
  std::string config_file;  // consumed by merge_config; declared for --help
  app.add_option("--config", config_file, "Plain-text key = value file for the command (flags take precedence)");

  CommonOpts sim;
  auto* simulate = app.add_subcommand("simulate", "Write noisy datasets for a regime");
  add_common(simulate, sim);

  InferOpts inf;
  auto* infer = app.add_subcommand("infer", "Run MAGI or PINN over a replicate range and record metrics");
  add_common(infer, inf.common);
  infer->add_option("--method", inf.method, "magi | pinn");
  infer->add_option("--lambda", inf.lambdas, "PINN data-loss weight(s)")->delimiter(',');
  infer->add_option("--epochs", inf.epochs, "PINN training epochs")->check(CLI::PositiveNumber);
  infer->add_option("--learning-rate", inf.learning_rate, "PINN Adam learning rate");
  infer->add_option("--hidden-layers", inf.hidden_layers, "PINN hidden layers")->check(CLI::Range(1, 8));
  infer->add_option("--width", inf.width, "PINN hidden width")->check(CLI::PositiveNumber);
  infer->add_option("--warmup", inf.warmup, "NUTS warmup iterations")->check(CLI::NonNegativeNumber);
  infer->add_option("--samples", inf.samples, "NUTS post-warmup draws")->check(CLI::PositiveNumber);
  infer->add_option("--target-accept", inf.target_accept, "Dual-averaging target")->check(CLI::Range(0.05, 0.99));
  infer->add_option("--max-depth", inf.max_depth, "NUTS maximum tree depth")->check(CLI::Range(1, 15));
  infer->add_option("--temperature", inf.temperature, "Divide GP-prior and ODE terms by this")->check(CLI::PositiveNumber);
  infer->add_flag("--forecast", inf.forecast, "Use the regime's forecasting protocol");
  infer->add_flag("--save-draws", inf.save_draws, "Keep raw posterior draws");
  infer->add_option("--jobs", inf.jobs, "Parallel runs")->check(CLI::PositiveNumber);
  infer->add_option("--scale-note", inf.scale_note, "Tag appended to every row's flag");

  std::string report_in, report_out;
  auto* report = app.add_subcommand("report", "Boxplot statistics per (method, lambda, metric, target)");
  report->add_option("--in", report_in, "Results CSV (default <out>/results.csv)");
  report->add_option("--out", report_out, "Write the summary CSV here as well");

  app.add_subcommand("regimes", "List built-in regimes");
  app.add_subcommand("selfcheck", "Finite-difference and oracle spot checks");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = merge_config(app, std::move(args));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*simulate) return cmd_simulate(sim);
    if (*infer) return cmd_infer(inf);
    if (*report) {
      if (report_in.empty()) report_in = (fs::path(default_out_dir()) / "results.csv").string();
      return cmd_report(report_in, report_out);
    }
    if (app.got_subcommand("regimes")) return cmd_regimes();
    if (app.got_subcommand("selfcheck")) return cmd_selfcheck();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
