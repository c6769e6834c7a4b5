// sde.hpp — Euler–Maruyama integration of the nonlinear energy-driven
// state-reduction SDE
//
//   dpsi = [-i H - (sigma^2/8) (H - <H>)^2] psi dt + (sigma/2)(H - <H>) psi dW
//
// (hbar = 1), its multi-channel generalisation for commuting observables, and
// the instrumented trajectory record everything downstream consumes.
#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "qsr/hilbert.hpp"
#include "qsr/rng.hpp"
#include "qsr/types.hpp"

namespace qsr {

/// Integration controls. Durations are expressed through the reduction
/// timescale tau_R = 1 / (sigma^2 V0) resolved at run time.
struct SimConfig {
  double sigma = 1.0;              ///< coupling, units of 1/(energy sqrt(time))
  double dt = 0.0;                 ///< step; <= 0 selects tau_R / 1000
  double horizon_tau = 20.0;       ///< total time in multiples of tau_R (>= 1)
  double collapse_threshold = 1e-12;  ///< stop when V < thr * range^2; <=0 off
  int record_stride = 0;           ///< record every k-th step; <= 0 automatic
  std::uint64_t seed = 0;          ///< master seed for substream derivation
  bool record_states = false;      ///< keep the state at every recorded point
  bool record_noise = false;       ///< keep every Wiener increment
};

/// Initial data: a pure state or a statistical mixture of pure states.
struct InitialCondition {
  std::vector<std::pair<double, StateVector>> components;  ///< (weight, state)

  static InitialCondition pure(StateVector psi) {
    InitialCondition ic;
    ic.components.emplace_back(1.0, std::move(psi));
    return ic;
  }
  static InitialCondition mixture(
      std::vector<std::pair<double, StateVector>> parts) {
    InitialCondition ic;
    ic.components = std::move(parts);
    return ic;
  }
  bool is_pure() const { return components.size() == 1; }

  /// Ensemble density matrix sum_i w_i |psi_i><psi_i| (weights normalised).
  DensityMatrix density() const;
  /// Ensemble-level energy mean/variance of the density under dec.
  std::pair<double, double> ensemble_moments(
      const SpectralDecomposition& dec) const;
  /// Throws validation_error on bad weights/states.
  void validate(int dimension, const Tolerances& tol = {}) const;
};

/// One realisation with its instrumentation series. Scalar series are sampled
/// on the recording grid; after threshold termination the state is a fixed
/// point of the dynamics, so recorded values continue frozen to the horizon.
struct Trajectory {
  std::vector<double> times;
  std::vector<double> H;         ///< energy <H>_t
  std::vector<double> V;         ///< variance V_t
  std::vector<double> beta;      ///< third central moment
  std::vector<double> norm_err;  ///< pre-renormalisation norm defect, last step
  std::vector<double> compensator;  ///< Z_t = sigma^2 int_0^t V^2 du (trapezoid)
  std::vector<Rvec> level_probs;    ///< P_{n,t} per recorded point
  std::vector<int> monitored_levels;              ///< degenerate levels tracked
  std::vector<std::vector<double>> complement;    ///< [monitored][record]
  std::vector<StateVector> states;                ///< optional
  std::vector<double> noise;                      ///< optional per-step dW

  double H0 = 0.0, V0 = 0.0;
  double sup_abs_dH = 0.0;   ///< sup_t |H_t - H_0| over every integrator step
  double sup_V = 0.0;        ///< sup_t V_t over every integrator step
  double max_norm_err = 0.0; ///< largest per-step norm defect
  StateVector final_state;
  std::optional<int> terminal_level;     ///< set iff threshold-terminated
  std::optional<double> terminal_time;
  int member = 0;                        ///< mixture component realised
};

/// Resolved discretisation shared by every trajectory of a run.
struct TimeGrid {
  double dt = 0.0;
  double tau_r = 0.0;
  long n_steps = 0;
  int stride = 1;
  long n_records() const { return n_steps / stride + 1; }
};

/// Resolve dt / stride / step count from the config and the ensemble-level
/// initial variance. Throws config_error on invalid settings.
TimeGrid resolve_grid(const SimConfig& cfg, double v0_ensemble, double range);

// ---- single-step integrators --------------------------------------------

/// One Euler–Maruyama step; returns the renormalised state and the norm
/// defect |  ||psi + dpsi|| - 1 | accumulated before renormalisation.
std::pair<StateVector, double> em_step(const StateVector& psi,
                                       const SpectralDecomposition& dec,
                                       double sigma, double dt, double dw);

/// One reduction channel: an observable with its own coupling strength.
struct Channel {
  SpectralDecomposition dec;
  double sigma = 1.0;
};

/// A commuting family of reduction channels plus the generating Hamiltonian.
/// Pairwise commutators (and each channel against the Hamiltonian) are
/// validated once at construction; a non-commuting pair throws a
/// validation_error naming the offenders.
struct MultiChannel {
  std::vector<Channel> channels;
  Cmat hamiltonian;

  MultiChannel(std::vector<Channel> ch, Cmat h, const Tolerances& tol = {});
};

/// One Euler–Maruyama step of the multi-channel SDE
///   dpsi = -i H psi dt - 1/8 sum_a sigma_a^2 (F_a - <F_a>)^2 psi dt
///          + 1/2 sum_a sigma_a (F_a - <F_a>) psi dW_a.
/// With one channel whose observable is the Hamiltonian this is bitwise
/// identical to em_step given the same increment.
std::pair<StateVector, double> em_step_multi(const StateVector& psi,
                                             const MultiChannel& mc, double dt,
                                             const std::vector<double>& dw);

// ---- full trajectories ---------------------------------------------------

/// Options controlling what a trajectory integration records beyond the
/// scalar series (projector expectations for the listed degenerate levels).
struct RecordPlan {
  std::vector<int> monitored_levels;
  std::vector<Cmat> complement_projectors;  ///< one per monitored level
};

/// Integrate one realisation on an explicit grid with an explicit stream.
/// Core primitive behind simulate() and the ensemble runner.
Trajectory integrate_trajectory(const StateVector& psi0,
                                const SpectralDecomposition& dec,
                                const SimConfig& cfg, const TimeGrid& grid,
                                philox4x64& stream, const RecordPlan& plan);

/// Convenience single-trajectory run: derives the grid from cfg, samples the
/// initial condition with substream child_seed(cfg.seed, 0), monitors every
/// populated degenerate level of pure initial states, and records noise per
/// cfg.record_noise. V0 = 0 with collapse detection armed terminates
/// immediately at the initial eigenlevel.
Trajectory simulate(const SimConfig& cfg, const InitialCondition& init,
                    const SpectralDecomposition& dec);

/// Mixture sampling: draws a component index by its weight (one uniform
/// variate; pure initial conditions consume nothing).
int sample_member(const InitialCondition& init, philox4x64& stream);

/// Build the monitored-level plan for a pure initial state: every level with
/// multiplicity > 1 and weight > tol.prob, with its orthogonal complement.
RecordPlan make_record_plan(const StateVector& psi0,
                            const SpectralDecomposition& dec,
                            const Tolerances& tol = {});

}  // namespace qsr
