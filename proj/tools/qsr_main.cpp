// Command-line driver: simulate / exact / lindblad / verify-all / compare.
// Exit codes: 0 success, 1 a check failed, 2 configuration or usage error,
// 3 numeric failure during integration.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qsr/runner.hpp"

namespace {

struct CliValues {
  std::string fixture;
  std::string config;
  std::string out;
  std::string mode;
  long n_traj = 0;
  std::uint64_t seed = 0;
  double dt = 0.0;
  double sigma = 0.0;
  double horizon_tau = 0.0;
  double collapse_threshold = 0.0;
  int workers = 0;
  int record_stride = 0;
  long csv_max_traj = 0;
  std::vector<double> lambdas;
  std::vector<double> eval_times;
  std::vector<std::string> checks;
};

/// Shared flags; every subcommand accepts the same surface so a config file
/// can drive any of them.
void add_common(CLI::App* sub, CliValues& v) {
  sub->add_option("--fixture", v.fixture,
                  "Builtin fixture name (qubit, spin-pair, spin-pair-mixed) "
                  "or path to a fixture JSON file");
  sub->add_option("--config", v.config,
                  "JSON config file; command-line flags override its fields");
  sub->add_option("--seed", v.seed, "Master seed for the run");
  sub->add_option("--n-traj", v.n_traj, "Number of trajectories / draws");
  sub->add_option("--dt", v.dt, "Integrator step (default: tau_R / 1000)");
  sub->add_option("--sigma", v.sigma, "Coupling strength (default 1)");
  sub->add_option("--out", v.out, "Output directory (default ./out)");
  sub->add_option("--workers", v.workers,
                  "Worker threads (0 = hardware); results are identical for "
                  "any value");
  sub->add_option("--horizon-tau", v.horizon_tau,
                  "Horizon in units of tau_R");
  sub->add_option("--collapse-threshold", v.collapse_threshold,
                  "Terminal variance threshold (fraction of range^2)");
  sub->add_option("--record-stride", v.record_stride,
                  "Record every k-th step (0 = auto)");
  sub->add_option("--csv-max-traj", v.csv_max_traj,
                  "Cap on trajectories written to trajectories.csv");
  sub->add_option("--lambdas", v.lambdas, "Tail thresholds for maximal bounds")
      ->delimiter(',');
  sub->add_option("--eval-times", v.eval_times,
                  "Evaluation times in units of tau_R (weighted mode)")
      ->delimiter(',');
  sub->add_option("--checks", v.checks,
                  "Subset of checks to run (verify-all)")
      ->delimiter(',');
}

/// defaults < config file < explicit flags.
qsr::RunConfig assemble(const CLI::App* sub, const CliValues& v,
                        bool& mode_explicit) {
  qsr::RunConfig rc;
  mode_explicit = false;
  if (sub->count("--config") > 0) {
    rc = qsr::load_run_config(v.config);
    std::ifstream in(v.config);
    nlohmann::json j;
    in >> j;
    mode_explicit = j.contains("mode");
  }
  if (sub->count("--fixture")) rc.fixture = v.fixture;
  if (sub->count("--seed")) rc.seed = v.seed;
  if (sub->count("--n-traj")) rc.n_trajectories = v.n_traj;
  if (sub->count("--dt")) rc.dt = v.dt;
  if (sub->count("--sigma")) rc.sigma = v.sigma;
  if (sub->count("--out")) rc.out_dir = v.out;
  if (sub->count("--workers")) rc.workers = v.workers;
  if (sub->count("--horizon-tau")) rc.horizon_tau = v.horizon_tau;
  if (sub->count("--collapse-threshold"))
    rc.collapse_threshold = v.collapse_threshold;
  if (sub->count("--record-stride")) rc.record_stride = v.record_stride;
  if (sub->count("--csv-max-traj")) rc.csv_max_traj = v.csv_max_traj;
  if (sub->count("--lambdas")) rc.lambdas = v.lambdas;
  if (sub->count("--eval-times")) rc.eval_times_tau = v.eval_times;
  if (sub->count("--checks")) rc.checks = v.checks;
  return rc;
}

/// Constrain the (possibly config-supplied) mode to what a subcommand can
/// run, falling back to the subcommand default when nothing was specified.
void settle_mode(qsr::RunConfig& rc, bool mode_explicit,
                 const std::vector<qsr::RunMode>& allowed,
                 qsr::RunMode fallback) {
  if (!mode_explicit) {
    rc.mode = fallback;
    return;
  }
  for (qsr::RunMode m : allowed)
    if (rc.mode == m) return;
  std::string list;
  for (qsr::RunMode m : allowed)
    list += (list.empty() ? "" : ", ") + qsr::mode_name(m);
  throw qsr::config_error("mode '" + qsr::mode_name(rc.mode) +
                          "' is not valid here (expected: " + list + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Stochastic energy-driven state reduction: simulation, closed-form "
      "solutions and statistical verification"};
  app.set_version_flag("--version", "qsr 0.1.0");
  app.require_subcommand(1);

  CliValues v;
  auto* sim = app.add_subcommand(
      "simulate", "Integrate the nonlinear reduction dynamics (mode: sde)");
  auto* exact = app.add_subcommand(
      "exact",
      "Closed-form path machinery (modes: girsanov-scalar, girsanov-weighted)");
  auto* lind = app.add_subcommand(
      "lindblad",
      "Ensemble-density evolution (modes: lindblad-closed, lindblad-ode)");
  auto* verify = app.add_subcommand(
      "verify-all", "Run every statistical check against a fresh ensemble");
  auto* compare = app.add_subcommand(
      "compare", "Cross-validate two modes (--mode a,b)");
  for (CLI::App* sub : {sim, exact, lind, verify, compare})
    add_common(sub, v);
  std::string mode_flag;
  for (CLI::App* sub : {sim, exact, lind, verify})
    sub->add_option("--mode", mode_flag, "Run mode for this subcommand");
  compare->add_option("--mode", mode_flag,
                      "Comma-separated pair of modes to cross-validate")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), 2);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    bool mode_explicit = false;
    qsr::RunConfig rc = assemble(sub, v, mode_explicit);
    using qsr::RunMode;

    if (sub == compare) {
      const auto pos = mode_flag.find(',');
      if (pos == std::string::npos || pos == 0 || pos + 1 == mode_flag.size())
        throw qsr::config_error(
            "compare needs --mode <a>,<b> (two comma-separated modes)");
      const RunMode a = qsr::parse_mode(mode_flag.substr(0, pos));
      const RunMode b = qsr::parse_mode(mode_flag.substr(pos + 1));
      if (a == b)
        throw qsr::config_error("compare needs two distinct modes");
      return qsr::run_compare(a, b, rc);
    }

    if (sub->count("--mode")) {
      rc.mode = qsr::parse_mode(mode_flag);
      mode_explicit = true;
    }
    if (sub == sim) {
      settle_mode(rc, mode_explicit, {RunMode::sde}, RunMode::sde);
    } else if (sub == exact) {
      settle_mode(rc, mode_explicit,
                  {RunMode::girsanov_scalar, RunMode::girsanov_weighted},
                  RunMode::girsanov_scalar);
    } else if (sub == lind) {
      settle_mode(rc, mode_explicit,
                  {RunMode::lindblad_closed, RunMode::lindblad_ode},
                  RunMode::lindblad_closed);
    } else {
      settle_mode(rc, mode_explicit, {RunMode::verify_all},
                  RunMode::verify_all);
    }
    return qsr::run(rc);
  } catch (const qsr::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const qsr::error& e) {
    // configuration and validation problems (including fixture issues)
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
