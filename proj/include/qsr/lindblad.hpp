// lindblad.hpp — deterministic ensemble-level evolution: the energy-dephasing
// master equation
//
//   d rho/dt = -i [H, rho] + (sigma^2/4) (H rho H - H^2 rho / 2 - rho H^2 / 2)
//
// solved both in closed form (level-block damping) and by RK4, plus the
// long-time unitary average for comparison.
#pragma once

#include <vector>

#include "qsr/ensemble.hpp"
#include "qsr/hilbert.hpp"
#include "qsr/types.hpp"

namespace qsr {

/// A density matrix resolved into level blocks B_nm = P_n rho P_m. The
/// dephasing flow acts diagonally on this grid: block (n, m) picks up
/// e^{-i(E_n - E_m)t - sigma^2 (E_n - E_m)^2 t / 8}.
struct BlockDecomposedDensity {
  std::vector<Cmat> blocks;  ///< D x D row-major
  Rvec eigenvalues;          ///< D representative eigenvalues
  int dimension = 0;

  static BlockDecomposedDensity from_density(const DensityMatrix& rho,
                                             const SpectralDecomposition& dec);
  DensityMatrix to_density() const;
  /// Apply the dephasing factors in place for duration t with coupling sigma.
  void evolve(double sigma, double t);

  int level_count() const { return static_cast<int>(eigenvalues.size()); }
  Cmat& block(int n, int m) { return blocks[n * level_count() + m]; }
  const Cmat& block(int n, int m) const { return blocks[n * level_count() + m]; }
};

/// Exact solution of the dephasing master equation at time t >= 0.
DensityMatrix rho_closed_form(const DensityMatrix& rho0,
                              const SpectralDecomposition& dec, double sigma,
                              double t, const Tolerances& tol = {});

/// RK4 integration of the master equation up to t_end. dt <= 0 selects
/// 1e-3 * min(1, 8 / (sigma^2 range^2)). The iterate is re-Hermitised every
/// step and trace-renormalised at the end; if the result has an eigenvalue
/// below -tol.psd an integration_error reports the step size as too coarse.
DensityMatrix rho_integrate(const DensityMatrix& rho0,
                            const SpectralDecomposition& dec, double sigma,
                            double t_end, double dt = 0.0,
                            const Tolerances& tol = {});

/// Time average of the bare unitary evolution over [0, T]:
///   sum_n P_n rho0 P_n
///   + (1/T) sum_{n != m} P_n rho0 P_m [sin(w T)/w + i(cos(w T) - 1)/w],
/// w = E_n - E_m. Converges to the diagonal part as T -> inf.
DensityMatrix unitary_time_average(const DensityMatrix& rho0,
                                   const SpectralDecomposition& dec, double T,
                                   const Tolerances& tol = {});

/// Empirical ensemble density sum_i |psi_i(t)><psi_i(t)| / n at every
/// recorded grid time of a state-recorded ensemble. Reduction is performed
/// in trajectory-index order (deterministic across worker counts).
std::vector<DensityMatrix> ensemble_density_from_trajectories(
    const EnsembleSeries& series);

/// Master-equation right-hand side (exposed for integration tests).
Cmat dephasing_rhs(const Cmat& rho, const Cmat& h, double sigma);

}  // namespace qsr
