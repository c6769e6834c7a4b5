// stats.hpp — statistical verification of the reduction laws against Monte
// Carlo ensembles. Every check reduces to CheckResult leaves whose pass/fail
// is recomputable from (kind, statistic, target, tolerance) alone; composite
// checks aggregate leaves by counting failures.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsr/ensemble.hpp"
#include "qsr/girsanov.hpp"
#include "qsr/hilbert.hpp"

namespace qsr {

enum class CheckKind {
  equals,      ///< passed <=> |statistic - target| <= tolerance
  upper_bound  ///< passed <=> statistic <= target
};

struct CheckResult {
  std::string name;
  CheckKind kind = CheckKind::equals;
  double statistic = 0.0;
  double target = 0.0;
  double tolerance = 0.0;
  long n_samples = 0;
  bool passed = false;
  std::string detail;
  std::optional<double> p_value;
  std::vector<CheckResult> subchecks;
};

/// Leaf builders (pass/fail computed from the numbers, nothing else).
CheckResult leaf_equals(std::string name, double statistic, double target,
                        double tolerance, long n, std::string detail = "",
                        std::optional<double> p = std::nullopt);
CheckResult leaf_bound(std::string name, double statistic, double bound,
                       long n, std::string detail = "",
                       std::optional<double> p = std::nullopt);
/// Aggregate: statistic = number of failed subchecks, bound 0.
CheckResult aggregate(std::string name, std::vector<CheckResult> subs,
                      long n, std::string detail = "");

nlohmann::ordered_json check_to_json(const CheckResult& c);

// ---- distribution helpers ------------------------------------------------

/// Two-sided normal p-value for a z score.
double normal_p_value(double z);
/// Upper-tail chi-square p-value with k degrees of freedom.
double chi_square_p_value(double statistic, int dof);
/// Two-sample Kolmogorov–Smirnov distance (inputs copied and sorted).
double ks_statistic(std::vector<double> a, std::vector<double> b);
/// Asymptotic two-sample KS p-value for distance d at sizes (n, m).
double ks_p_value(double d, std::size_t n, std::size_t m);
/// Two-sample KS critical distance at significance alpha.
double ks_critical_value(double alpha, std::size_t n, std::size_t m);

// ---- ensemble checks -----------------------------------------------------

/// Terminal-level frequencies against expected weights: per-level 3-sigma
/// binomial bands plus an aggregate chi-square with a p > 0.001 floor.
/// Unterminated trajectories are excluded from the table and reported; fewer
/// than 100 terminated trajectories is a validation_error.
CheckResult check_born_frequencies(const EnsembleSeries& series,
                                   const Rvec& expected_pi);

/// The energy process is a martingale: (a) mean flatness |<H_t> - <H_0>| <=
/// 3 SE at every grid point, (b) terminal mean = initial mean, (c) increments
/// uncorrelated with the current level (|corr| <= 3/sqrt(n)).
CheckResult check_energy_martingale(const EnsembleSeries& series);

/// Variance laws: (a) mean decay is monotone within noise, (b) the mean obeys
/// V0/(1 + sigma^2 V0 t) + 3 SE pointwise, (c) E[(H_t - H_0)^2] + E[V_t]
/// equals the initial variance pathwise-on-average, (d) the terminal-energy
/// sample variance equals the initial variance (3 jackknife SE).
CheckResult check_variance_laws(const EnsembleSeries& series);

/// Pathwise supremum bounds: (a) E[sup (H - H_0)^2] <= 4 V0 (1 + 3 rel-SE),
/// (b) exceedance of sup(H - H_0)^2 over lambda^2 V0 at most 1/lambda^2,
/// (c) the same for sup V. Suprema were taken over every integrator step.
CheckResult check_doob_bounds(const EnsembleSeries& series,
                              const std::vector<double>& lambdas = {1.5, 2.0,
                                                                    3.0});

/// V_t equals the conditional expectation of (H_inf - H_t)^2: tested
/// unconditionally at every grid time and within deciles of H_t at several
/// fixed times (bins with fewer than 30 samples are skipped). Bands come
/// from the exact null moments implied by the recorded level weights: a
/// 3-SE normal band where the null is near-Gaussian, a same-confidence
/// Bernstein tail band where it is skewed (rare-outcome regimes).
CheckResult check_conditional_variance(const EnsembleSeries& series);

/// Lüders confinement for a pure initial state: (a) monitored complement
/// expectations vanish in ensemble mean at every grid point (numerical-zero
/// floor 1e-12), (b) every terminated trajectory's final state matches the
/// projected initial state at its terminal level with fidelity >= 1 - fid_tol.
CheckResult check_luders_confinement(const EnsembleSeries& series,
                                     const SpectralDecomposition& dec,
                                     const StateVector& psi0,
                                     double fid_tol = 1e-6);

/// Mixed-state reduction: terminal frequencies match tr(P_n rho0) and the
/// per-outcome conditional terminal density matches P_n rho0 P_n / tr within
/// a 4/sqrt(n_k) max-element band.
CheckResult check_mixed_state_luders(const EnsembleSeries& series,
                                     const SpectralDecomposition& dec,
                                     const DensityMatrix& rho0);

/// Convenience wrapper: run the ensemble and apply check_mixed_state_luders.
CheckResult run_mixed_state_pipeline(const InitialCondition& init,
                                     const SpectralDecomposition& dec,
                                     const SimConfig& cfg, long n_traj,
                                     const EnsembleOptions& opts = {});

// ---- diagnostics ---------------------------------------------------------

/// Relative-fluctuation diagnostics of the variance decay: eta_t =
/// Var[V_t] / mean[V_t]^2, its running time integral xi_t, and the product
/// mean[V_t] (1 + sigma^2 V0 (t + xi_t)) / V0 (close to 1 when the mean-decay
/// closure is sharp). Reported, never asserted.
nlohmann::ordered_json variance_diagnostics(const EnsembleSeries& series);

/// Render a pass/fail table (one line per check, nested checks indented).
std::string render_table(const std::vector<CheckResult>& checks);

/// True iff every check (recursively) passed.
bool all_passed(const std::vector<CheckResult>& checks);

}  // namespace qsr
