// girsanov.hpp — closed-form solutions in terms of the transformed driving
// process W*_t = W_t + sigma int_0^t <H>_s ds, which is Brownian under the
// transformed measure Q. Exponential sums are stabilised by max-exponent
// subtraction throughout. All transformed-measure computations are defined
// for finite horizons only: the change of measure degenerates as t -> inf.
#pragma once

#include <optional>
#include <vector>

#include "qsr/hilbert.hpp"
#include "qsr/rng.hpp"
#include "qsr/sde.hpp"
#include "qsr/types.hpp"

namespace qsr {

/// Level weights implied by (w*, t): p_n ∝ pi_n exp(sigma E_n w* -
/// sigma^2 E_n^2 t / 2), normalised.
Rvec implied_probabilities(const Rvec& pi, const Rvec& eigenvalues,
                           double sigma, double wstar, double t,
                           const Tolerances& tol = {});

/// Energy as a function of the transformed driver:
///   h(w*, t) = sum_n pi_n E_n e^{a_n} / sum_n pi_n e^{a_n},
/// a_n = sigma E_n w* - sigma^2 E_n^2 t / 2. Nondecreasing in w*.
double h_of_wstar(const Rvec& pi, const Rvec& eigenvalues, double sigma,
                  double wstar, double t, const Tolerances& tol = {});

/// Inverse likelihood ratio Lambda*_t = sum_n pi_n e^{a_n} (dP/dQ on F_t).
double lambda_star_of_wstar(const Rvec& pi, const Rvec& eigenvalues,
                            double sigma, double wstar, double t,
                            const Tolerances& tol = {});

/// Full closed-form state at (w*, t): each level block P_n|psi0> carries
///   e^{-i E_n t} e^{sigma E_n w*/2 - sigma^2 E_n^2 t/4} / sqrt(Lambda*_t).
/// Unit norm by construction (checked against tol.num).
StateVector state_closed_form(const StateVector& psi0,
                              const SpectralDecomposition& dec, double sigma,
                              double wstar, double t,
                              const Tolerances& tol = {});

/// One scalar realisation of the physical-measure SDE for the transformed
/// driver, dW* = sigma h(W*, t) dt + dW, with the implied-distribution
/// instrumentation mirroring a full trajectory (frozen after collapse).
struct GirsanovPath {
  std::vector<double> times;
  std::vector<double> wstar;
  std::vector<double> lambda_star;
  std::vector<double> H;
  double weight = 1.0;  ///< Lambda* at the final recorded time
  std::optional<int> terminal_level;
  std::optional<double> terminal_time;
};

/// Integrate the scalar SDE under cfg (grid resolved from the implied initial
/// variance exactly as for full trajectories). The path terminates when the
/// implied variance drops below the collapse threshold.
GirsanovPath simulate_wstar_physical(const Rvec& pi, const Rvec& eigenvalues,
                                     const SimConfig& cfg, philox4x64& stream,
                                     const Tolerances& tol = {});

/// Deterministic ensemble average of an observable G at time t:
///   sum_{m,n} tr(G P_n rho0 P_m) e^{i(E_m - E_n)t - sigma^2 (E_m-E_n)^2 t/8}.
/// Equals tr(G rho_t) for the dephasing evolution; imaginary part must stay
/// within tol.num for Hermitian G (checked).
cplx ensemble_average_observable(const Cmat& g, const DensityMatrix& rho0,
                                 const SpectralDecomposition& dec, double sigma,
                                 double t, const Tolerances& tol = {});

/// Self-normalised importance-weighted mean with effective sample size.
struct WeightedMean {
  double mean = 0.0;
  double std_error = 0.0;
  double ess = 0.0;     ///< (sum w)^2 / sum w^2
  bool degenerate = false;  ///< ess below 10: estimate unreliable
};

/// Weighted expectation of samples (value, weight >= 0). Throws
/// validation_error for negative or all-zero weights.
WeightedMean weighted_expectation(const std::vector<double>& values,
                                  const std::vector<double>& weights);

}  // namespace qsr
