// runner.hpp — experiment orchestration behind the command line: resolved run
// configurations, artifact writers (manifest.json / trajectories.csv /
// report.json), the mode dispatcher, and cross-mode comparisons.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsr/ensemble.hpp"
#include "qsr/fixtures.hpp"
#include "qsr/stats.hpp"

namespace qsr {

enum class RunMode {
  sde,
  girsanov_scalar,
  girsanov_weighted,
  lindblad_closed,
  lindblad_ode,
  verify_all
};

/// Parse/print the mode names used in configs and on the command line
/// ("sde", "girsanov-scalar", "girsanov-weighted", "lindblad-closed",
/// "lindblad-ode", "verify-all"). Unknown names throw config_error.
RunMode parse_mode(const std::string& name);
std::string mode_name(RunMode mode);

/// A fully described run. Optional fields fall back to mode-aware defaults
/// when resolved (precedence: built-in defaults < config file < flags).
struct RunConfig {
  std::string fixture = "qubit";  ///< built-in name or path to a fixture file
  RunMode mode = RunMode::verify_all;
  long n_trajectories = 1000;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int workers = 0;  ///< execution detail: never recorded in artifacts

  std::optional<double> sigma;
  std::optional<double> dt;
  std::optional<double> horizon_tau;
  std::optional<double> collapse_threshold;
  std::optional<int> record_stride;

  std::vector<double> lambdas{1.5, 2.0, 3.0};
  std::vector<std::string> checks;  ///< empty: every applicable check
  std::vector<double> eval_times_tau{0.1, 1.0, 10.0};
  long csv_max_traj = 100;  ///< trajectories written to CSV (reports use all)
};

/// Merge fields from a JSON config document (strict: unknown keys throw
/// config_error naming the key and origin).
void apply_config_json(RunConfig& rc, const nlohmann::json& j,
                       const std::string& origin);
RunConfig load_run_config(const std::string& path);

/// Built-in fixture name, else a path to load.
Fixture resolve_fixture(const std::string& name_or_path);

/// Concrete SimConfig for this run. verify-all defaults the horizon to
/// 80 tau_R (collapse-dependent checks need essentially full termination);
/// every other mode keeps the plain default of 20 tau_R.
SimConfig resolve_sim(const RunConfig& rc, const Fixture& fx);

/// Run one mode end to end: writes <out>/manifest.json plus mode artifacts
/// and returns the process exit code (0 ok / 1 check failure). Configuration
/// and numeric problems escape as exceptions for main() to map to 2 / 3.
int run(const RunConfig& rc);

/// Run two modes and compare them at matched times (distributional KS plus
/// moment agreement for trajectory modes; max-element density agreement for
/// deterministic modes). Writes manifest + report, returns 0 / 1.
int run_compare(RunMode a, RunMode b, const RunConfig& rc);

/// The comparison check itself (exposed for tests).
CheckResult compare_modes(RunMode a, RunMode b, const RunConfig& rc);

}  // namespace qsr
