#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "odebench/experiments.hpp"
#include "odebench/gp.hpp"
#include "odebench/integrate.hpp"
#include "odebench/magi.hpp"
#include "odebench/pinn.hpp"
#include "odebench/sampler.hpp"

namespace py = pybind11;
using namespace odebench;

namespace {

ObservationSet make_observations(const Vec& times, const Mat& values, const std::vector<bool>& mask) {
  ObservationSet obs;
  obs.times = times;
  obs.values = values;
  obs.mask = mask;
  obs.noise_sd.assign(mask.size(), 0.0);
  obs.validate();
  return obs;
}

MethodSpec make_method(const std::string& method, int warmup, int samples, int epochs, double lambda,
                       std::uint64_t seed) {
  MethodSpec m;
  m.method = method;
  m.magi.n_warmup = warmup;
  m.magi.n_samples = samples;
  m.pinn.epochs = epochs;
  m.pinn.lambda = lambda;
  m.pinn.seed = seed;
  if (method != "magi" && method != "pinn") throw ConfigError("method must be magi or pinn");
  return m;
}

}  // namespace

PYBIND11_MODULE(_odebench, m) {
  m.doc() = "ODE inverse-problem benchmark: MAGI and PINN";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IntegrationError>(m, "IntegrationError", PyExc_RuntimeError);

  py::class_<OdeModel, std::shared_ptr<OdeModel>>(m, "OdeModel")
      .def_property_readonly("name", &OdeModel::name)
      .def_property_readonly("state_dim", &OdeModel::state_dim)
      .def_property_readonly("param_dim", &OdeModel::param_dim)
      .def_property_readonly("component_names", &OdeModel::component_names)
      .def_property_readonly("param_names", &OdeModel::param_names)
      .def("rhs", &OdeModel::rhs, py::arg("x"), py::arg("theta"), py::arg("t") = 0.0)
      .def("jac_state", &OdeModel::jac_state, py::arg("x"), py::arg("theta"), py::arg("t") = 0.0)
      .def("jac_param", &OdeModel::jac_param, py::arg("x"), py::arg("theta"), py::arg("t") = 0.0);
  m.def(
      "make_model", [](const std::string& name) { return std::const_pointer_cast<OdeModel>(make_model(name)); },
      py::arg("name"));
  m.def("registered_models", &registered_models);

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("times", &Trajectory::times)
      .def_readonly("values", &Trajectory::values)
      .def_readonly("component_names", &Trajectory::component_names);
  m.def(
      "integrate",
      [](const std::string& model, const Vec& x0, const Vec& theta, const Vec& times, double rtol,
         double atol) {
        Rk45Options o;
        o.rel_tol = rtol;
        o.abs_tol = atol;
        return integrate_rk45(*make_model(model), x0, theta, times, o);
      },
      py::arg("model"), py::arg("x0"), py::arg("theta"), py::arg("times"), py::arg("rtol") = 1e-8,
      py::arg("atol") = 1e-10);
  m.def("uniform_grid", &uniform_grid, py::arg("t0"), py::arg("t1"), py::arg("count"));

  py::class_<MaternHyper>(m, "MaternHyper")
      .def(py::init([](double amplitude, double lengthscale, double mean) {
             MaternHyper h{amplitude, lengthscale, mean};
             h.validate();
             return h;
           }),
           py::arg("amplitude") = 1.0, py::arg("lengthscale") = 1.0, py::arg("mean") = 0.0)
      .def_readwrite("amplitude", &MaternHyper::amplitude)
      .def_readwrite("lengthscale", &MaternHyper::lengthscale)
      .def_readwrite("mean", &MaternHyper::mean);
  m.def("matern", &matern_eval, py::arg("hyper"), py::arg("s"), py::arg("t"), py::arg("ds") = 0,
        py::arg("dt") = 0);
  m.def(
      "kernel_mats",
      [](const MaternHyper& h, const Vec& grid) {
        const GpKernelMats k = build_kernel_mats(h, grid);
        py::dict d;
        d["K"] = k.K;
        d["dK"] = k.dK;
        d["Kd"] = k.Kd;
        d["ddK"] = k.ddK;
        d["m"] = k.m;
        d["C"] = k.C;
        return d;
      },
      py::arg("hyper"), py::arg("grid"));

  py::class_<GpFit>(m, "GpFit")
      .def_readonly("hyper", &GpFit::hyper)
      .def_readonly("noise_sd", &GpFit::noise_sd)
      .def_readonly("degenerate", &GpFit::degenerate)
      .def_readonly("objective", &GpFit::objective);
  m.def(
      "gp_fit",
      [](const Vec& times, const Vec& values, bool fourier_prior, int iterations) {
        GpFitOptions o;
        o.iterations = iterations;
        return gp_smooth_fit(times, values, fourier_prior, o);
      },
      py::arg("times"), py::arg("values"), py::arg("fourier_prior") = false, py::arg("iterations") = 1500);

  py::class_<ChainResult>(m, "ChainResult")
      .def_readonly("draws", &ChainResult::draws)
      .def_readonly("step_size", &ChainResult::step_size)
      .def_readonly("divergence_count", &ChainResult::divergence_count)
      .def_readonly("mean_accept_stat", &ChainResult::mean_accept_stat);
  m.def(
      "nuts",
      [](const std::function<std::pair<double, Vec>(const Vec&)>& fn, const Vec& init, int warmup,
         int samples, std::uint64_t seed, double target_accept, int max_depth) {
        NutsConfig c;
        c.n_warmup = warmup;
        c.n_samples = samples;
        c.seed = seed;
        c.target_accept = target_accept;
        c.max_tree_depth = max_depth;
        return nuts_sample(
            [&fn](const Vec& q, Vec& g) {
              auto [lp, grad] = fn(q);
              g = grad;
              return lp;
            },
            init, c);
      },
      py::arg("logdensity"), py::arg("init"), py::arg("warmup") = 1000, py::arg("samples") = 1000,
      py::arg("seed") = 1, py::arg("target_accept") = 0.8, py::arg("max_depth") = 10,
      "NUTS on a callable q -> (log density, gradient).");

  py::class_<ObservationSet>(m, "ObservationSet")
      .def(py::init(&make_observations), py::arg("times"), py::arg("values"), py::arg("mask"))
      .def_readonly("times", &ObservationSet::times)
      .def_readonly("values", &ObservationSet::values)
      .def_readonly("mask", &ObservationSet::mask)
      .def_readonly("noise_sd", &ObservationSet::noise_sd)
      .def_readonly("seed", &ObservationSet::seed);

  py::class_<RegimeSpec>(m, "Regime")
      .def_readonly("name", &RegimeSpec::name)
      .def_readonly("model", &RegimeSpec::model)
      .def_readonly("theta", &RegimeSpec::theta)
      .def_readonly("x0", &RegimeSpec::x0)
      .def_readonly("mask", &RegimeSpec::mask)
      .def_readonly("n_obs", &RegimeSpec::n_obs)
      .def_readonly("grid_points", &RegimeSpec::grid_points)
      .def("observation_times", &RegimeSpec::observation_times)
      .def("in_sample_grid", &RegimeSpec::in_sample_grid);
  m.def("regime_names", &regime_names);
  m.def("regime", [](const std::string& name) { return find_regime(name); }, py::arg("name"));
  m.def("simulate", &simulate_dataset, py::arg("regime"), py::arg("seed"));
  m.def("dataset_seed", &dataset_seed, py::arg("base"), py::arg("replicate"));
  m.def("truth", &truth_trajectory, py::arg("regime"), py::arg("times"));

  m.def(
      "magi_log_posterior",
      [](const RegimeSpec& regime, const ObservationSet& data, const Mat& x, const Vec& theta,
         const Vec& log_sigma) {
        MagiConfig cfg;
        cfg.fourier_prior = regime.fourier_prior;
        const ModelPtr model = make_model(regime.model);
        const DiscretizationGrid grid = make_grid(regime.in_sample_grid(), data.times);
        const PreparedProblem prep = prepare_problem(model, grid, data, cfg);
        MagiPosterior post(prep.problem);
        const Vec q = pack_state(prep.problem, {x, theta, log_sigma});
        Vec g;
        const double lp = post.log_density_grad(q, g);
        return std::make_pair(lp, g);
      },
      py::arg("regime"), py::arg("data"), py::arg("x"), py::arg("theta"), py::arg("log_sigma"),
      "Log posterior and packed gradient (x column-major, theta, log sigma) on the regime grid.");

  py::class_<RunOutcome>(m, "RunOutcome")
      .def_readonly("failed", &RunOutcome::failed)
      .def_readonly("error", &RunOutcome::error)
      .def_readonly("theta_hat", &RunOutcome::theta_hat)
      .def_readonly("theta_interval", &RunOutcome::theta_interval)
      .def_readonly("estimate", &RunOutcome::estimate)
      .def_property_readonly("metrics", [](const RunOutcome& o) {
        py::list rows;
        for (const auto& r : o.rows)
          rows.append(py::make_tuple(r.target, r.metric, r.value, r.flag));
        return rows;
      });
  m.def(
      "infer",
      [](const RegimeSpec& regime, const ObservationSet& data, const std::string& method, int warmup,
         int samples, int epochs, double lambda, std::uint64_t seed, bool forecast) {
        const MethodSpec spec = make_method(method, warmup, samples, epochs, lambda, seed);
        py::gil_scoped_release release;
        return run_single(regime, spec, data, 0, seed, forecast);
      },
      py::arg("regime"), py::arg("data"), py::arg("method"), py::arg("warmup") = 3000,
      py::arg("samples") = 3000, py::arg("epochs") = 60000, py::arg("lambda_") = 10.0,
      py::arg("seed") = 1, py::arg("forecast") = false);
}
