// module.cpp — python extension exposing the core operations: spectral
// helpers, trajectory ensembles, the closed-form solutions, and the full
// artifact-writing run pipeline (same configuration schema as the CLI).
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include <qsr/ensemble.hpp>
#include <qsr/fixtures.hpp>
#include <qsr/girsanov.hpp>
#include <qsr/hilbert.hpp>
#include <qsr/lindblad.hpp>
#include <qsr/runner.hpp>
#include <qsr/sde.hpp>
#include <qsr/stats.hpp>

namespace py = pybind11;

namespace {

qsr::SimConfig make_sim(double sigma, std::uint64_t seed, double horizon_tau,
                        double dt, double collapse_threshold,
                        int record_stride) {
  qsr::SimConfig cfg;
  cfg.sigma = sigma;
  cfg.seed = seed;
  cfg.horizon_tau = horizon_tau;
  cfg.dt = dt;
  cfg.collapse_threshold = collapse_threshold;
  cfg.record_stride = record_stride;
  return cfg;
}

/// Flatten an ensemble into numpy-friendly buffers.
py::dict series_to_dict(const qsr::EnsembleSeries& s) {
  const py::ssize_t n = py::ssize_t(s.n());
  const py::ssize_t k = py::ssize_t(s.k());

  py::array_t<double> h({n, k}), v({n, k});
  py::array_t<long> term_level(n);
  py::array_t<double> term_time(n);
  py::array_t<int> member(n);
  auto hm = h.mutable_unchecked<2>();
  auto vm = v.mutable_unchecked<2>();
  auto tl = term_level.mutable_unchecked<1>();
  auto tt = term_time.mutable_unchecked<1>();
  auto mem = member.mutable_unchecked<1>();
  for (py::ssize_t i = 0; i < n; ++i) {
    const auto& tr = s.traj[std::size_t(i)];
    for (py::ssize_t j = 0; j < k; ++j) {
      hm(i, j) = tr.H[std::size_t(j)];
      vm(i, j) = tr.V[std::size_t(j)];
    }
    tl(i) = tr.terminal_level ? *tr.terminal_level : -1;
    tt(i) = tr.terminal_time ? *tr.terminal_time
                             : std::numeric_limits<double>::quiet_NaN();
    mem(i) = tr.member;
  }

  py::dict out;
  out["times"] = qsr::Rvec(Eigen::Map<const qsr::Rvec>(s.times.data(),
                                                       Eigen::Index(k)));
  out["eigenvalues"] = s.level_eigenvalues;
  out["H"] = h;
  out["V"] = v;
  out["terminal_level"] = term_level;
  out["terminal_time"] = term_time;
  out["member"] = member;
  out["h0"] = s.h0_ensemble;
  out["v0"] = s.v0_ensemble;
  return out;
}

qsr::InitialCondition init_from_components(
    std::vector<std::pair<double, qsr::StateVector>> parts) {
  if (parts.size() == 1 && parts.front().first == 1.0)
    return qsr::InitialCondition::pure(std::move(parts.front().second));
  return qsr::InitialCondition::mixture(std::move(parts));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Stochastic energy-reduction toolkit: trajectory simulation, "
      "closed-form solutions, and statistical verification.";

  py::register_exception<qsr::config_error>(m, "ConfigError",
                                            PyExc_ValueError);
  py::register_exception<qsr::validation_error>(m, "ValidationError",
                                                PyExc_ValueError);
  py::register_exception<qsr::numeric_error>(m, "NumericError",
                                             PyExc_ArithmeticError);

  // ---- spectral helpers --------------------------------------------------
  m.def(
      "eigenvalues",
      [](const qsr::Cmat& observable) {
        return qsr::spectral_decompose(observable).eigenvalues();
      },
      py::arg("observable"),
      "Distinct eigenvalues of a Hermitian observable, ascending, with "
      "near-degenerate values merged.");

  m.def(
      "level_probabilities",
      [](const qsr::StateVector& psi, const qsr::Cmat& observable) {
        return qsr::level_probabilities(psi, qsr::spectral_decompose(observable));
      },
      py::arg("state"), py::arg("observable"),
      "Projection weights of a state onto each eigenspace.");

  m.def(
      "moments",
      [](const qsr::StateVector& psi, const qsr::Cmat& observable) {
        const auto mo = qsr::moments(psi, qsr::spectral_decompose(observable));
        return py::make_tuple(mo.energy, mo.variance, mo.skewness);
      },
      py::arg("state"), py::arg("observable"),
      "Energy expectation, variance, and third central moment of a state.");

  m.def(
      "luders_state",
      [](const qsr::StateVector& psi, const qsr::Cmat& observable, int level) {
        return qsr::luders_state(psi, qsr::spectral_decompose(observable),
                                 level);
      },
      py::arg("state"), py::arg("observable"), py::arg("level"),
      "Normalised projection of a state onto eigenspace `level`.");

  // ---- trajectory ensembles ----------------------------------------------
  const char* simulate_doc =
      "Integrate an ensemble of reduction trajectories. Returns a dict of "
      "arrays: times, eigenvalues, H (n x k), V (n x k), terminal_level "
      "(-1 while unterminated), terminal_time (NaN likewise), member, h0, "
      "v0. Trajectory i is driven by substream i of `seed`, so results do "
      "not depend on `workers`.";
  m.def(
      "simulate",
      [](const qsr::Cmat& observable,
         std::vector<std::pair<double, qsr::StateVector>> mixture,
         double sigma, long n_traj, std::uint64_t seed, double horizon_tau,
         double dt, double collapse_threshold, int record_stride,
         int workers) {
        const auto dec = qsr::spectral_decompose(observable);
        const auto cfg = make_sim(sigma, seed, horizon_tau, dt,
                                  collapse_threshold, record_stride);
        qsr::EnsembleOptions opts;
        opts.workers = workers;
        qsr::EnsembleSeries series;
        {
          py::gil_scoped_release release;
          series = qsr::run_ensemble(cfg, init_from_components(std::move(mixture)),
                                     dec, n_traj, opts);
        }
        return series_to_dict(series);
      },
      py::arg("observable"), py::arg("mixture"), py::arg("sigma") = 1.0,
      py::arg("n_traj") = 100, py::arg("seed") = 0,
      py::arg("horizon_tau") = 20.0, py::arg("dt") = 0.0,
      py::arg("collapse_threshold") = 1e-12, py::arg("record_stride") = 0,
      py::arg("workers") = 0, simulate_doc);
  m.def(
      "simulate",
      [](const qsr::Cmat& observable, const qsr::StateVector& psi0,
         double sigma, long n_traj, std::uint64_t seed, double horizon_tau,
         double dt, double collapse_threshold, int record_stride,
         int workers) {
        const auto dec = qsr::spectral_decompose(observable);
        const auto cfg = make_sim(sigma, seed, horizon_tau, dt,
                                  collapse_threshold, record_stride);
        qsr::EnsembleOptions opts;
        opts.workers = workers;
        qsr::EnsembleSeries series;
        {
          py::gil_scoped_release release;
          series = qsr::run_ensemble(cfg, qsr::InitialCondition::pure(psi0),
                                     dec, n_traj, opts);
        }
        return series_to_dict(series);
      },
      py::arg("observable"), py::arg("state"), py::arg("sigma") = 1.0,
      py::arg("n_traj") = 100, py::arg("seed") = 0,
      py::arg("horizon_tau") = 20.0, py::arg("dt") = 0.0,
      py::arg("collapse_threshold") = 1e-12, py::arg("record_stride") = 0,
      py::arg("workers") = 0, simulate_doc);

  // ---- closed-form solutions ---------------------------------------------
  m.def(
      "rho_closed_form",
      [](const qsr::Cmat& observable, const qsr::DensityMatrix& rho0,
         double sigma, double t) {
        return qsr::rho_closed_form(rho0, qsr::spectral_decompose(observable),
                                    sigma, t);
      },
      py::arg("observable"), py::arg("rho0"), py::arg("sigma"), py::arg("t"),
      "Exact ensemble density at time t (off-diagonal blocks damped as "
      "exp(-sigma^2 dE^2 t / 8)).");

  m.def(
      "rho_integrate",
      [](const qsr::Cmat& observable, const qsr::DensityMatrix& rho0,
         double sigma, double t, double dt) {
        return qsr::rho_integrate(rho0, qsr::spectral_decompose(observable),
                                  sigma, t, dt);
      },
      py::arg("observable"), py::arg("rho0"), py::arg("sigma"), py::arg("t"),
      py::arg("dt") = 0.0,
      "Direct RK4 integration of the ensemble-density equation.");

  m.def(
      "ensemble_average",
      [](const qsr::Cmat& g, const qsr::DensityMatrix& rho0,
         const qsr::Cmat& observable, double sigma, double t) {
        return qsr::ensemble_average_observable(
            g, rho0, qsr::spectral_decompose(observable), sigma, t);
      },
      py::arg("g"), py::arg("rho0"), py::arg("observable"), py::arg("sigma"),
      py::arg("t"),
      "Deterministic ensemble average of observable g at time t.");

  m.def(
      "state_closed_form",
      [](const qsr::Cmat& observable, const qsr::StateVector& psi0,
         double sigma, double wstar, double t) {
        return qsr::state_closed_form(psi0, qsr::spectral_decompose(observable),
                                      sigma, wstar, t);
      },
      py::arg("observable"), py::arg("state"), py::arg("sigma"),
      py::arg("wstar"), py::arg("t"),
      "Closed-form trajectory state as a function of the transformed driver "
      "value.");

  // ---- fixtures and the full pipeline ------------------------------------
  m.def("builtin_names", &qsr::builtin_names,
        "Names of the built-in observable/state fixtures.");

  m.def(
      "fixture_info",
      [](const std::string& name_or_path) {
        const qsr::Fixture fx = qsr::resolve_fixture(name_or_path);
        const auto [h0, v0] = fx.init.ensemble_moments(fx.dec);
        py::dict out;
        out["name"] = fx.name;
        out["dimension"] = fx.dimension;
        out["observable"] = fx.observable;
        out["eigenvalues"] = fx.dec.eigenvalues();
        out["h0"] = h0;
        out["v0"] = v0;
        out["components"] = fx.init.components;
        return out;
      },
      py::arg("name_or_path"),
      "Load a built-in or file fixture and describe it.");

  m.def(
      "run_json",
      [](const std::string& settings) {
        qsr::RunConfig rc;
        qsr::apply_config_json(rc, nlohmann::json::parse(settings),
                               "python settings");
        py::gil_scoped_release release;
        return qsr::run(rc);
      },
      py::arg("settings"),
      "Run one mode end to end from a JSON settings string (same schema as "
      "the CLI config file, plus 'mode' and 'out'). Writes manifest.json and "
      "mode artifacts into the output directory; returns the process-style "
      "exit code (0 ok, 1 a verification check failed).");
}
