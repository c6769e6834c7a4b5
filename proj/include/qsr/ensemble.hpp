// ensemble.hpp — deterministic Monte Carlo ensembles over a worker pool.
// Trajectory i is always driven by substream child_seed(seed, i) and lands in
// slot i, so results are bitwise independent of worker count and scheduling.
#pragma once

#include <optional>
#include <vector>

#include "qsr/sde.hpp"

namespace qsr {

struct EnsembleOptions {
  int workers = 0;                   ///< <= 0: hardware concurrency
  bool record_states = false;        ///< keep states at every recorded point
  bool keep_terminal_states = true;  ///< keep the state at termination
};

/// Flattened per-trajectory record on the shared grid (K recorded points).
struct TrajSummary {
  std::vector<double> H, V, beta, norm_err, Z;  ///< K each
  std::vector<double> P;   ///< K x D row-major level weights
  std::vector<double> Pi;  ///< K x n_monitored row-major complement weights
  double H0 = 0.0, V0 = 0.0;
  double sup_abs_dH = 0.0, sup_V = 0.0, max_norm_err = 0.0;
  std::optional<int> terminal_level;
  std::optional<double> terminal_time;
  int member = 0;
  StateVector terminal_state;            ///< empty unless kept
  std::vector<StateVector> states;       ///< empty unless recorded
};

/// A full ensemble on a common grid, ordered by trajectory index.
struct EnsembleSeries {
  std::vector<double> times;      ///< K grid times
  Rvec level_eigenvalues;         ///< D representative eigenvalues
  std::vector<int> monitored_levels;
  std::vector<TrajSummary> traj;  ///< n entries, index-ordered
  double h0_ensemble = 0.0;       ///< tr(rho0 H)
  double v0_ensemble = 0.0;       ///< tr(rho0 H^2) - tr(rho0 H)^2
  TimeGrid grid;
  SimConfig config;
  int dimension = 0;

  std::size_t n() const { return traj.size(); }
  std::size_t k() const { return times.size(); }
  /// Indices of trajectories that never crossed the collapse threshold.
  std::vector<std::size_t> unterminated() const;
};

/// Run n_traj independent realisations of cfg/init/dec. Throws the first
/// worker exception, if any, after joining the pool.
EnsembleSeries run_ensemble(const SimConfig& cfg, const InitialCondition& init,
                            const SpectralDecomposition& dec, long n_traj,
                            const EnsembleOptions& opts = {});

}  // namespace qsr
